use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn shadowlab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_shadowlab"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn run_config(dir: &Path, name: &str, text: &str, extra: &[&str]) -> (Output, std::path::PathBuf) {
    let cfg = dir.join(format!("{name}.cfg"));
    fs::write(&cfg, text).unwrap();
    let out = dir.join(name);
    let mut args = vec!["run", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()];
    args.extend_from_slice(extra);
    (shadowlab(&args), out)
}

fn report(out: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(out.join("report.json")).unwrap()).unwrap()
}

const REFUTE_CASE1: &str = "
[scenario]
name = case1
epsilon = 0.4

[pipeline]
name = refute
delta = 0.05
epsilon = 0.05
";

#[test]
fn refute_case1_exits_negative_with_bound() {
    let dir = tempfile::tempdir().unwrap();
    let (o, out) = run_config(dir.path(), "refute", REFUTE_CASE1, &[]);
    assert_eq!(
        o.status.code(),
        Some(2),
        "{}",
        String::from_utf8_lossy(&o.stderr)
    );
    let r = report(&out);
    assert_eq!(r["verdict"], "refuted");
    assert!((r["lower_bound"].as_f64().unwrap() - 0.1).abs() < 1e-12);
    assert_eq!(r["scenario"]["params"]["epsilon"].as_f64(), Some(0.4));
    let csv = fs::read_to_string(out.join("series.csv")).unwrap();
    assert!(csv.starts_with("series,index,x,value\n"));
    assert!(csv.lines().skip(1).all(|l| l.split(',').count() == 4));
    let meta: Value =
        serde_json::from_str(&fs::read_to_string(out.join("meta.json")).unwrap()).unwrap();
    assert_eq!(meta["exit_code"], 2);
}

#[test]
fn classify_saddle_cycle_reports_multipliers() {
    let dir = tempfile::tempdir().unwrap();
    let text = "
[scenario]
name = saddle_cycle

[pipeline]
name = classify
point = 1, 0, 0
period = 2pi
";
    let (o, out) = run_config(dir.path(), "classify", text, &[]);
    assert_eq!(
        o.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&o.stderr)
    );
    let r = report(&out);
    assert_eq!(r["verdict"], "hyperbolic");
    let m: Vec<f64> = r["multipliers"]
        .as_array()
        .unwrap()
        .iter()
        .map(|e| e["re"].as_f64().unwrap())
        .collect();
    let want = [
        (-4.0 * std::f64::consts::PI).exp(),
        (2.0 * std::f64::consts::PI).exp(),
    ];
    assert_eq!(m.len(), 2);
    for (a, b) in m.iter().zip(want) {
        assert!((a - b).abs() <= 1e-5 * b.max(1.0), "{a} vs {b}");
    }
}

#[test]
fn missing_scenario_key_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let text = "[scenario]\nepsilon = 0.4\n\n[pipeline]\nname = refute\nepsilon = 0.05\n";
    let (o, out) = run_config(dir.path(), "missing", text, &[]);
    assert_eq!(o.status.code(), Some(1));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("missing key `name` in [scenario]"), "{err}");
    assert!(!out.exists());
}

#[test]
fn unknown_pipeline_key_names_line() {
    let dir = tempfile::tempdir().unwrap();
    let text = format!("{REFUTE_CASE1}epsilom = 1\n");
    let (o, _) = run_config(dir.path(), "unknown", &text, &[]);
    assert_eq!(o.status.code(), Some(1));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("line 10") && err.contains("epsilom"), "{err}");
}

#[test]
fn range_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let text = REFUTE_CASE1.replace("delta = 0.05", "delta = -0.05");
    let (o, _) = run_config(dir.path(), "range", &text, &[]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("must be > 0"));
}

#[test]
fn listings_are_stable() {
    let a = shadowlab(&["list", "scenarios"]);
    let b = shadowlab(&["list", "scenarios"]);
    assert!(a.status.success());
    assert_eq!(a.stdout, b.stdout);
    let text = String::from_utf8(a.stdout).unwrap();
    assert!(text.lines().count() >= 5);
    assert!(text.lines().any(|l| l.starts_with("case1")));
    let p = shadowlab(&["list", "pipelines"]);
    assert!(p.status.success());
    let text = String::from_utf8(p.stdout).unwrap();
    for name in [
        "shadow-search",
        "refute",
        "classify",
        "splitting",
        "quasi-hyperbolic",
        "chain-graph",
    ] {
        assert!(text.contains(name), "{name}");
    }
}

#[test]
fn noisy_search_is_deterministic_across_threads() {
    let dir = tempfile::tempdir().unwrap();
    let text = "
[scenario]
name = linear_saddle3d

[pipeline]
name = shadow-search
x0 = 0.3, -0.2, 0
count = 40
noise = 1e-4
tube = 1e-3
epsilon = 5e-3
seed_radius = 1e-3
candidates = 27
trace_samples = 50

[run]
seed = 7
";
    let (a, out_a) = run_config(dir.path(), "a", text, &["--threads", "1"]);
    let (b, out_b) = run_config(dir.path(), "b", text, &["--threads", "4"]);
    assert_eq!(
        a.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&a.stderr)
    );
    assert_eq!(b.status.code(), Some(0));
    let ra = fs::read(out_a.join("report.json")).unwrap();
    let rb = fs::read(out_b.join("report.json")).unwrap();
    assert_eq!(ra, rb);
    assert_eq!(
        fs::read(out_a.join("series.csv")).unwrap(),
        fs::read(out_b.join("series.csv")).unwrap()
    );
    assert_eq!(report(&out_a)["verdict"], "shadowed");

    let (c, out_c) = run_config(dir.path(), "c", text, &["--seed", "8"]);
    assert_eq!(c.status.code(), Some(0));
    assert_eq!(report(&out_c)["seed"], 8);
}

#[test]
fn splitting_and_quasi_hyperbolic_on_saddle_cycle() {
    let dir = tempfile::tempdir().unwrap();
    let text = "
[scenario]
name = saddle_cycle

[pipeline]
name = splitting
point = 1, 0, 0
steps = 1000
l = 0.25
";
    let (o, out) = run_config(dir.path(), "split", text, &[]);
    assert_eq!(
        o.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&o.stderr)
    );
    let r = report(&out);
    assert_eq!(r["verdict"], "dominated");
    assert_eq!(r["hyperbolic"], true);
    let (o, _) = run_config(
        dir.path(),
        "split2",
        &text.replace("l = 0.25", "l = 0.2"),
        &[],
    );
    assert_eq!(o.status.code(), Some(2));

    let text = "
[scenario]
name = saddle_cycle

[pipeline]
name = quasi-hyperbolic
point = 1, 0, 0
x = 1.001, 0, 1e-5
tau = 2pi
eta = 0.5
delta = 0.01
";
    let (o, out) = run_config(dir.path(), "qh", text, &[]);
    assert_eq!(
        o.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&o.stderr)
    );
    let r = report(&out);
    assert_eq!(r["verdict"], "quasi_hyperbolic");
    let period = r["periodic_shadow"]["orbit"]["period"].as_f64().unwrap();
    assert!((period - 2.0 * std::f64::consts::PI).abs() < 1e-6);
}

#[test]
fn chain_graph_writes_graph_files() {
    let dir = tempfile::tempdir().unwrap();
    let text = "
[scenario]
name = linear_saddle3d

[pipeline]
name = chain-graph
region_lo = -1, -1, -1
region_hi = 1, 1, 1
hgrid = 0.2
delta = 0.1
";
    let (o, out) = run_config(dir.path(), "cg", text, &[]);
    assert_eq!(
        o.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&o.stderr)
    );
    let r = report(&out);
    assert_eq!(r["cell_count"], 1000);
    let cells = fs::read_to_string(out.join("cells.csv")).unwrap();
    assert_eq!(cells.lines().count(), 1001);
    let edges = fs::read_to_string(out.join("edges.txt")).unwrap();
    assert_eq!(
        edges.lines().count() as u64,
        r["edge_count"].as_u64().unwrap()
    );
}

#[test]
fn shipped_configs_parse() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut count = 0;
    for entry in fs::read_dir(&dir).unwrap() {
        let path = entry.unwrap().path();
        if path.extension().and_then(|e| e.to_str()) != Some("cfg") {
            continue;
        }
        let text = fs::read_to_string(&path).unwrap();
        let mut cfg = shadowlab_cli::ExperimentConfig::parse(&text)
            .unwrap_or_else(|e| panic!("{}: {e}", path.display()));
        let sc = shadowlab::builtin(&cfg.scenario, &cfg.scenario_params).unwrap();
        shadowlab_cli::Pipeline::parse(
            &cfg.pipeline,
            cfg.pipeline_line,
            &mut cfg.pipeline_params,
            &cfg.scenario,
            sc.spec.dim(),
        )
        .unwrap_or_else(|e| panic!("{}: {e}", path.display()));
        count += 1;
    }
    assert!(count >= 6);
}
