use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use swcrt_cli::commands::estimate_panel;
use swcrt_cli::ingest::{export_individual, export_means, parse_panel};
use swcrt_cli::{load_config, parse_config, RunConfig};
use swcrt_core::correlation::CorrelationSpec;
use swcrt_core::design::{DesignSpec, TreatmentStructure};
use swcrt_core::dgp::{simulate_trial, ScenarioSpec, TrialData};
use swcrt_core::weights::w4_closed_form_q3;

fn swcrt(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_swcrt"))
        .args(args)
        .current_dir(dir)
        .env_remove("SWCRT_THREADS")
        .output()
        .expect("binary runs")
}

fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p
}

fn read(path: impl AsRef<Path>) -> String {
    std::fs::read_to_string(path).unwrap()
}

fn shipped_config(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name)
}

/// Column `name` of a CSV table, as text.
fn column(csv: &str, name: &str) -> Vec<String> {
    let mut r = csv::Reader::from_reader(csv.as_bytes());
    let k = r.headers().unwrap().iter().position(|h| h == name).unwrap();
    r.records().map(|rec| rec.unwrap()[k].to_string()).collect()
}

fn assert_self_contained_svg(path: &Path) {
    let text = read(path);
    let doc = roxmltree::Document::parse(&text).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
    assert_eq!(doc.root_element().tag_name().name(), "svg");
    for node in doc.descendants().filter(|n| n.is_element()) {
        for a in node.attributes() {
            assert!(
                !a.name().contains("href") && !a.value().starts_with("url("),
                "{}: external reference {}",
                path.display(),
                a.value()
            );
        }
        assert!(!["image", "use", "script", "foreignObject"].contains(&node.tag_name().name()));
    }
}

#[test]
fn w2_weights_are_uniform_at_three_sequences() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(
        dir.path(),
        "w.toml",
        "command = \"weights\"\n[weights]\nfamilies = [\"w2\"]\nsequences = [3]\ngammas = [0.0, 0.6]\n",
    );
    let out = swcrt(&["weights", "--config", cfg.to_str().unwrap(), "--out", "res"], dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = read(dir.path().join("res/weights.csv"));
    assert_eq!(column(&csv, "weight"), vec!["0.5"; 4]);
    assert_eq!(column(&csv, "index"), vec!["2", "3", "2", "3"]);
    assert_self_contained_svg(&dir.path().join("res/weights-w2.svg"));
}

#[test]
fn w4_weights_move_from_three_quarters_to_all_on_first_exposure() {
    let dir = tempfile::tempdir().unwrap();
    // the grid stops short of 1, where the working correlation is singular
    let top = 1.0 - 1e-6;
    let cfg = write(
        dir.path(),
        "w.toml",
        &format!("[weights]\nfamilies = [\"w4\"]\nsequences = [3]\ngammas = [0.0, {top}]\n"),
    );
    let out = swcrt(&["weights", "--config", cfg.to_str().unwrap(), "--out", "res"], dir.path());
    assert!(out.status.success());
    let w: Vec<f64> = column(&read(dir.path().join("res/weights.csv")), "weight")
        .iter()
        .map(|s| s.parse().unwrap())
        .collect();
    assert_eq!(&w[..2], &[0.75, 0.25]);
    let closed = w4_closed_form_q3(top);
    assert!((w[2] - closed[0]).abs() < 1e-9 && (w[3] - closed[1]).abs() < 1e-9);
    assert!((w[2] - 1.0).abs() < 1e-5 && w[3].abs() < 1e-5);
}

#[test]
fn empty_gamma_grid_is_a_validation_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "w.toml", "[weights]\ngammas = []\n");
    let out = swcrt(&["weights", "--config", cfg.to_str().unwrap()], dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("gammas"));
}

#[test]
fn simulation_report_has_the_requested_replicates() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(
        dir.path(),
        "s.toml",
        "[scenario]\npreset = \"sim1-immediate\"\n[mc]\nn_reps = 100\n",
    );
    let out = swcrt(&["simulate", "--config", cfg.to_str().unwrap(), "--out", "res"], dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = read(dir.path().join("res/simreport.csv"));
    assert!(csv.starts_with(
        "scenario,estimator,correlation,variance_method,n_reps,mean,truth,pct_bias,precision,coverage,mc_se,n_failed\n"
    ));
    // 3 structures x 2 working correlations x 3 variance methods
    assert_eq!(column(&csv, "n_reps"), vec!["100"; 18]);
    for c in column(&csv, "coverage") {
        let c: f64 = c.parse().unwrap();
        assert!((0.0..=1.0).contains(&c));
    }
    assert_self_contained_svg(&dir.path().join("res/simreport-sim1-immediate.svg"));
}

#[test]
fn outputs_are_byte_stable_and_thread_independent() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(
        dir.path(),
        "s.toml",
        "[scenario]\npreset = \"sim3-calendar\"\n[mc]\nn_reps = 40\n",
    );
    let cfg = cfg.to_str().unwrap();
    let runs = [
        swcrt(&["simulate", "--config", cfg, "--out", "a", "--threads", "1"], dir.path()),
        swcrt(&["simulate", "--config", cfg, "--out", "b", "--threads", "4"], dir.path()),
        Command::new(env!("CARGO_BIN_EXE_swcrt"))
            .args(["simulate", "--config", cfg, "--out", "c"])
            .current_dir(dir.path())
            .env("SWCRT_THREADS", "2")
            .output()
            .unwrap(),
    ];
    assert!(runs.iter().all(|o| o.status.success()));
    let a = std::fs::read(dir.path().join("a/simreport.csv")).unwrap();
    assert!(!a.contains(&b'\r'));
    for other in ["b", "c"] {
        assert_eq!(a, std::fs::read(dir.path().join(other).join("simreport.csv")).unwrap());
        assert_eq!(
            std::fs::read(dir.path().join("a/simreport-sim3-calendar.svg")).unwrap(),
            std::fs::read(dir.path().join(other).join("simreport-sim3-calendar.svg")).unwrap()
        );
    }
    let seeded = swcrt(&["simulate", "--config", cfg, "--out", "d", "--seed", "99"], dir.path());
    assert!(seeded.status.success());
    assert_ne!(a, std::fs::read(dir.path().join("d/simreport.csv")).unwrap());
}

#[test]
fn unwritable_output_directory_names_the_path() {
    let dir = tempfile::tempdir().unwrap();
    write(dir.path(), "blocker", "a file, not a directory");
    let out = swcrt(&["weights", "--out", "blocker/res"], dir.path());
    assert_eq!(out.status.code(), Some(4));
    assert!(String::from_utf8_lossy(&out.stderr).contains("blocker"));
}

fn noiseless_exposure_trial() -> (DesignSpec, TrialData) {
    let s = ScenarioSpec::preset("sim2-exposure", 0).unwrap();
    let expected = s.expected_means();
    let k = s.design.cell_size();
    let outcomes = (0..s.design.n_clusters())
        .flat_map(|c| (0..s.design.n_periods()).flat_map(move |j| std::iter::repeat_n((c, j), k)))
        .map(|(c, j)| expected[(c, j)])
        .collect();
    let data = TrialData::from_outcomes(18, 10, k, outcomes).unwrap();
    (s.design, data)
}

#[test]
fn noiseless_exposure_export_recovers_the_average_effect() {
    let dir = tempfile::tempdir().unwrap();
    let (design, data) = noiseless_exposure_trial();
    let data_path = write(dir.path(), "trial.csv", &export_individual(&design, &data));
    let cfg = write(dir.path(), "e.toml", "[analysis]\nstructures = [\"ETI\", \"CTI\"]\n");
    let out = swcrt(
        &[
            "estimate",
            "--config",
            cfg.to_str().unwrap(),
            "--data",
            data_path.to_str().unwrap(),
            "--out",
            "res",
        ],
        dir.path(),
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = read(dir.path().join("res/estimates.csv"));
    assert!(csv.starts_with("structure,correlation,estimator,method,point,se,ci_low,ci_high,gamma_hat,aic,bic\n"));
    let mut r = csv::Reader::from_reader(csv.as_bytes());
    let mut seen = 0;
    for rec in r.records() {
        let rec = rec.unwrap();
        if &rec[2] == "ETATE" {
            let point: f64 = rec[4].parse().unwrap();
            assert!((point - 17.0 / 6.0).abs() < 1e-6, "{point}");
            seen += 1;
        }
    }
    assert_eq!(seen, 6);
    for corr in ["exchangeable", "independence"] {
        assert_self_contained_svg(&dir.path().join(format!("res/effects-{corr}.svg")));
    }
}

#[test]
fn aggregated_input_matches_individual_rows() {
    let s = ScenarioSpec {
        name: "collapse".into(),
        design: DesignSpec::new(8, 5, 6).unwrap(),
        structure: TreatmentStructure::CalendarVarying { xi: vec![1.0, -0.5, 2.0] },
        period_effects: vec![0.0, 0.3, 0.1, -0.2, 0.4],
        correlation: CorrelationSpec::exchangeable(0.2, 1.0),
        seed: 11,
    };
    let data = simulate_trial(&s).unwrap();
    let individual = parse_panel(&export_individual(&s.design, &data), "individual").unwrap();
    let aggregated = parse_panel(&export_means(&s.design, data.means()), "aggregated").unwrap();
    assert_eq!(individual.design, aggregated.design);
    assert!((&individual.means - &aggregated.means).abs().max() < 1e-10);

    let cfg = RunConfig::defaults();
    let a = estimate_panel(&cfg, &individual).unwrap();
    let b = estimate_panel(&cfg, &aggregated).unwrap();
    let points = |o: &swcrt_cli::Outcome| -> Vec<f64> {
        column(&o.artifacts[0].contents, "point").iter().map(|v| v.parse().unwrap()).collect()
    };
    let (pa, pb) = (points(&a), points(&b));
    assert_eq!(pa.len(), 18);
    for (x, y) in pa.iter().zip(&pb) {
        assert!((x - y).abs() <= 1e-10 * x.abs().max(1.0), "{x} vs {y}");
    }
}

#[test]
fn missing_period_column_is_a_schema_error() {
    let dir = tempfile::tempdir().unwrap();
    let data = write(dir.path(), "d.csv", "cluster,sequence,outcome\n1,1,0.5\n");
    let out = swcrt(&["estimate", "--data", data.to_str().unwrap()], dir.path());
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("\"period\""), "{err}");
}

#[test]
fn incomplete_panel_is_rejected() {
    let (design, data) = noiseless_exposure_trial();
    let text: String = export_means(&design, data.means())
        .lines()
        .filter(|l| !l.starts_with("4,7,"))
        .map(|l| format!("{l}\n"))
        .collect();
    assert!(matches!(
        parse_panel(&text, "t"),
        Err(swcrt_cli::CliError::UnbalancedPanel { .. })
    ));
}

#[test]
fn shipped_configs_round_trip() {
    for name in ["sim1-immediate.toml", "sim2-exposure.toml", "sim3-calendar.toml", "weights.toml"] {
        let cfg = load_config(&shipped_config(name)).unwrap();
        let again = parse_config(&cfg.to_toml(), name).unwrap();
        assert_eq!(cfg, again, "{name}");
    }
    let sim2 = load_config(&shipped_config("sim2-exposure.toml")).unwrap();
    assert_eq!(
        sim2.scenario.unwrap().spec.structure,
        TreatmentStructure::ExposureVarying {
            delta: vec![0.0, 0.0, 0.5, 1.0, 2.0, 4.0, 6.0, 6.0, 6.0]
        }
    );
    assert_eq!(RunConfig::defaults(), parse_config(&RunConfig::defaults().to_toml(), "d").unwrap());
}

#[test]
fn design_info_prints_the_schematic() {
    let dir = tempfile::tempdir().unwrap();
    let out = swcrt(
        &["design-info", "--config", shipped_config("sim1-immediate.toml").to_str().unwrap()],
        dir.path(),
    );
    assert!(out.status.success());
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("clusters 18  periods 10  cell size 30  sequences 9  clusters per sequence 2"));
    assert!(text.contains("       1  0 1 1 1 1 1 1 1 1 1"));
    assert!(std::fs::read_dir(dir.path()).unwrap().next().is_none(), "no files without --out");
}
