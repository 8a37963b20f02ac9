//! Long-horizon conservation, Ψ cocycle law on random segments and
//! non-hyperbolicity of the center cycle at every base point.

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use shadowlab::poincare::{classify_periodic, linear_poincare, PoincareOptions};
use shadowlab::scenarios::{builtin, case2_center_cycle};
use shadowlab::{flow_at, IntegratorOptions};

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]
    #[test]
    fn conserved_drift_over_long_horizons(
        which in 0usize..3,
        a in -1.0f64..1.0,
        b in -1.0f64..1.0,
        c in -1.0f64..1.0,
        t in 0.0f64..50.0,
    ) {
        let tol = 1e-10;
        let (name, x) = match which {
            0 => ("case1", vec![0.07 * a, 0.07 * b]),
            1 => ("case1_rotation", vec![0.05 * a, 0.05 * b, 0.05 * c]),
            _ => ("case2_center_cycle", vec![3.0 * a, b, c]),
        };
        let sc = builtin(name, &Default::default()).unwrap();
        let q = sc.spec.conserved().unwrap();
        let y = flow_at(&sc.spec, &x, t, &IntegratorOptions::with_tol(tol)).unwrap();
        prop_assert!((q.eval(&y) - q.eval(&x)).abs() <= 100.0 * tol);
    }
}

#[test]
fn psi_cocycle_law() {
    let opts = PoincareOptions::default();
    for (si, name) in [
        "saddle_cycle",
        "linear_saddle3d",
        "case2_center_cycle",
        "case1_rotation",
    ]
    .iter()
    .enumerate()
    {
        let sc = builtin(name, &Default::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(si as u64);
        let mut done = 0;
        while done < 50 {
            let x: Vec<f64> = match *name {
                "case1_rotation" => (0..3).map(|_| rng.random_range(-0.05..0.05)).collect(),
                "saddle_cycle" => vec![
                    rng.random_range(-1.5..1.5),
                    rng.random_range(-1.5..1.5),
                    rng.random_range(-0.5..0.5),
                ],
                _ => (0..3).map(|_| rng.random_range(-1.0..1.0)).collect(),
            };
            if sc.spec.field(&x).iter().map(|v| v * v).sum::<f64>().sqrt() < 1e-2 {
                continue;
            }
            let (s, t) = (rng.random_range(0.05..1.5), rng.random_range(0.05..1.5));
            let first = linear_poincare(&sc.spec, &x, s, &opts).unwrap();
            let second = linear_poincare(&sc.spec, &first.end, t, &opts).unwrap();
            let direct = linear_poincare(&sc.spec, &x, s + t, &opts).unwrap();
            let composed = &second.matrix * &first.matrix;
            let err = (&composed - &direct.matrix).amax() / direct.matrix.amax().max(1.0);
            assert!(err <= 1e-5, "{name}: cocycle error {err:e} at {x:?}");
            done += 1;
        }
    }
}

#[test]
fn center_cycle_non_hyperbolic_at_every_base_point() {
    let spec = case2_center_cycle(1.0);
    for k in 0..16 {
        let theta = k as f64 * std::f64::consts::TAU / 16.0;
        for y in [-0.5, 0.0, 0.3] {
            let rep = classify_periodic(
                &spec,
                &[theta, y, 0.0],
                std::f64::consts::TAU,
                &PoincareOptions::default(),
            )
            .unwrap();
            assert!(!rep.hyperbolic, "θ = {theta}, y = {y}");
        }
    }
}
