//! Refining the grid keeps every analytic recurrent point covered.

use std::collections::BTreeSet;

use shadowlab::chain_graph::{
    build_chain_graph, chain_recurrent_cells, ChainGraph, ChainGraphOptions, Region,
};
use shadowlab::scenarios::{builtin, InvariantSet};

fn samples(set: &InvariantSet) -> Vec<Vec<f64>> {
    match set {
        InvariantSet::Point { point } => vec![point.clone()],
        InvariantSet::Circle {
            center,
            radius,
            axes,
        } => (0..360)
            .map(|k| {
                let a = k as f64 * std::f64::consts::TAU / 360.0;
                let mut p = center.clone();
                p[axes.0] += radius * a.cos();
                p[axes.1] += radius * a.sin();
                p
            })
            .collect(),
        InvariantSet::Segment { a, b } => (0..=100)
            .map(|k| {
                let s = k as f64 / 100.0;
                a.iter().zip(b).map(|(x, y)| x + s * (y - x)).collect()
            })
            .collect(),
    }
}

fn covered(g: &ChainGraph, cr: &BTreeSet<usize>, p: &[f64]) -> bool {
    g.cells_touching(p).iter().any(|c| cr.contains(c))
}

fn check(name: &str, region: Region, h: f64, delta: f64) {
    let sc = builtin(name, &Default::default()).unwrap();
    assert!(
        !sc.facts.recurrent_sets.is_empty(),
        "{name} has no recurrent-set oracle"
    );
    for hh in [h, h / 2.0] {
        let g = build_chain_graph(
            &sc.spec,
            &region,
            hh,
            delta,
            3.0,
            5,
            &ChainGraphOptions::default(),
        )
        .unwrap();
        let cr = chain_recurrent_cells(&g);
        for set in &sc.facts.recurrent_sets {
            for p in samples(set) {
                assert!(covered(&g, &cr, &p), "{name}, h = {hh}: {p:?} not covered");
            }
        }
    }
}

#[test]
fn linear_saddle_origin_stays_covered() {
    check("linear_saddle3d", Region::cube(3, 1.0), 0.1, 0.05);
}

#[test]
fn saddle_cycle_recurrent_set_stays_covered() {
    let zr = 1.5 / 11.0;
    check(
        "saddle_cycle",
        Region::new(vec![-1.5, -1.5, -zr], vec![1.5, 1.5, zr]),
        1.0 / 11.0,
        0.05,
    );
}

#[test]
fn case1_segment_stays_covered() {
    check(
        "case1",
        Region::new(vec![-0.2, -0.1], vec![0.2, 0.1]),
        0.02,
        0.05,
    );
}
