//! The four subcommands. Each returns its artifacts in memory; they are
//! written together at the end by [`write_artifacts`].

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use nalgebra::DVector;
use swcrt_core::correlation::CorrelationKind;
use swcrt_core::design::{design_matrix, DesignSpec, StructureKind};
use swcrt_core::gls::{information_criteria, FitResult};
use swcrt_core::mc::{run_study, AnalysisSpec, SimReport};
use swcrt_core::variance::{contrast_report, variance_report, VarianceMethod, VarianceReport};
use swcrt_core::weights::{weight_curve_table, WeightFamily};

use crate::config::{Command, RunConfig};
use crate::error::{CliError, Result};
use crate::format::{optional, real};
use crate::ingest::{read_panel, Panel};
use crate::svg::{Figure, Panel as Chart, RefLine, Series, PALETTE};

pub const WEIGHTS_CSV: &str = "weights.csv";
pub const SIMREPORT_CSV: &str = "simreport.csv";
pub const ESTIMATES_CSV: &str = "estimates.csv";
pub const DESIGN_CSV: &str = "design.csv";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Artifact {
    pub name: String,
    pub contents: String,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Outcome {
    pub artifacts: Vec<Artifact>,
    /// Text for standard output.
    pub summary: String,
}

fn color(k: usize) -> &'static str {
    PALETTE[k % PALETTE.len()]
}

fn csv_table(header: &[&str], rows: &[Vec<String>]) -> String {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(Vec::new());
    w.write_record(header).expect("in-memory write");
    for r in rows {
        w.write_record(r).expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8 fields")
}

fn correlation_label(kind: CorrelationKind) -> &'static str {
    match kind {
        CorrelationKind::Exchangeable => "exchangeable",
        CorrelationKind::NestedExchangeable => "nested",
        CorrelationKind::Independence => "independence",
    }
}

fn short_correlation_label(kind: CorrelationKind) -> &'static str {
    match kind {
        CorrelationKind::Exchangeable => "exch",
        CorrelationKind::NestedExchangeable => "nested",
        CorrelationKind::Independence => "indep",
    }
}

/// Creates the directory and writes every artifact into it.
pub fn write_artifacts(dir: &Path, artifacts: &[Artifact]) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    let mut written = Vec::with_capacity(artifacts.len());
    for a in artifacts {
        let path = dir.join(&a.name);
        std::fs::write(&path, &a.contents).map_err(|e| CliError::io(&path, e))?;
        written.push(path);
    }
    Ok(written)
}

pub fn cmd_weights(cfg: &RunConfig) -> Result<Outcome> {
    let w = &cfg.weights;
    let mut rows = Vec::new();
    let mut artifacts = Vec::new();
    for &family in &w.families {
        let table = weight_curve_table(family, &w.sequences, &w.gammas)?;
        rows.extend(table.iter().map(|r| {
            vec![
                r.family.label().to_string(),
                r.n_sequences.to_string(),
                real(r.gamma),
                r.index.to_string(),
                real(r.weight),
                real(r.scaled_weight),
            ]
        }));
        if cfg.output.svg {
            artifacts.push(Artifact {
                name: format!("weights-{}.svg", family.label()),
                contents: weight_figure(family, &w.sequences, &w.gammas, &table).render(),
            });
        }
    }
    if cfg.output.csv {
        artifacts.insert(
            0,
            Artifact {
                name: WEIGHTS_CSV.into(),
                contents: csv_table(&["family", "Q", "gamma", "index", "weight", "scaled_weight"], &rows),
            },
        );
    }
    Ok(Outcome {
        summary: format!("{} weight rows for {} families\n", rows.len(), w.families.len()),
        artifacts,
    })
}

fn index_name(family: WeightFamily) -> &'static str {
    match family {
        WeightFamily::W1 | WeightFamily::W4 => "exposure time",
        WeightFamily::W2 | WeightFamily::W3 => "calendar period",
    }
}

fn weight_figure(
    family: WeightFamily,
    sequences: &[usize],
    gammas: &[f64],
    table: &[swcrt_core::weights::WeightRow],
) -> Figure {
    let panels = sequences
        .iter()
        .map(|&q| Chart {
            title: format!("Q = {q}"),
            x_label: index_name(family).into(),
            y_label: "scaled weight".into(),
            series: gammas
                .iter()
                .enumerate()
                .map(|(k, &g)| {
                    let pts = table
                        .iter()
                        .filter(|r| r.n_sequences == q && r.gamma == g)
                        .map(|r| (r.index as f64, r.scaled_weight))
                        .collect();
                    Series::line(format!("gamma = {}", real(g)), pts, color(k))
                })
                .collect(),
            ref_lines: vec![
                RefLine {
                    y: 0.0,
                    label: String::new(),
                    dashed: false,
                },
                RefLine {
                    y: 1.0,
                    label: "nominal weight 1".into(),
                    dashed: true,
                },
            ],
            x_categories: None,
        })
        .collect();
    Figure {
        title: format!("Estimand weights {}", family.label()),
        panels,
        columns: sequences.len().min(3),
    }
}

fn analyses(cfg: &RunConfig) -> Vec<AnalysisSpec> {
    let mut out = Vec::new();
    for &corr in &cfg.analysis.correlations {
        for &s in &cfg.analysis.structures {
            out.push(AnalysisSpec::new(s, corr, &cfg.analysis.methods));
        }
    }
    out
}

pub fn cmd_simulate(cfg: &RunConfig) -> Result<Outcome> {
    let scenario = cfg
        .scenario
        .as_ref()
        .ok_or_else(|| CliError::Validation("simulate needs a [scenario] block".into()))?;
    let reports = run_study(&scenario.spec, &analyses(cfg), cfg.mc.n_reps, cfg.mc.base_seed)?;
    let rows: Vec<Vec<String>> = reports
        .iter()
        .map(|r| {
            vec![
                r.scenario.clone(),
                r.estimator.estimator_label().into(),
                correlation_label(r.correlation).into(),
                r.method.label().into(),
                r.n_reps.to_string(),
                real(r.mean_estimate),
                real(r.true_estimand),
                optional(r.percent_bias),
                real(r.precision),
                real(r.coverage),
                real(r.mc_se),
                r.n_failed.to_string(),
            ]
        })
        .collect();
    let mut artifacts = Vec::new();
    if cfg.output.csv {
        artifacts.push(Artifact {
            name: SIMREPORT_CSV.into(),
            contents: csv_table(
                &[
                    "scenario",
                    "estimator",
                    "correlation",
                    "variance_method",
                    "n_reps",
                    "mean",
                    "truth",
                    "pct_bias",
                    "precision",
                    "coverage",
                    "mc_se",
                    "n_failed",
                ],
                &rows,
            ),
        });
    }
    if cfg.output.svg {
        artifacts.push(Artifact {
            name: format!("simreport-{}.svg", scenario.spec.name),
            contents: simulation_figure(&scenario.spec.name, &reports, &cfg.analysis.methods).render(),
        });
    }
    let failed: usize = reports.iter().map(|r| r.n_failed).max().unwrap_or(0);
    Ok(Outcome {
        summary: format!(
            "{}: {} replicates, {} report rows, at most {} failed replicates per analysis\n",
            scenario.spec.name,
            cfg.mc.n_reps,
            reports.len(),
            failed
        ),
        artifacts,
    })
}

fn simulation_figure(name: &str, reports: &[SimReport], methods: &[VarianceMethod]) -> Figure {
    let mut keys: Vec<(StructureKind, CorrelationKind)> = Vec::new();
    for r in reports {
        if !keys.contains(&(r.estimator, r.correlation)) {
            keys.push((r.estimator, r.correlation));
        }
    }
    let categories: Vec<String> = keys
        .iter()
        .map(|(s, c)| format!("{} {}", s.estimator_label(), short_correlation_label(*c)))
        .collect();
    let first = |s, c| reports.iter().find(|r| r.estimator == s && r.correlation == c);
    let relative = reports.iter().all(|r| r.percent_bias.is_some());
    let bias_points = keys
        .iter()
        .enumerate()
        .filter_map(|(k, &(s, c))| {
            first(s, c).map(|r| {
                let b = if relative { r.percent_bias.unwrap() } else { r.absolute_bias };
                (k as f64, b)
            })
        })
        .collect();
    let bias = Chart {
        title: "Bias".into(),
        x_label: "estimator and working correlation".into(),
        y_label: if relative { "percent bias" } else { "bias" }.into(),
        series: vec![Series::points("mean estimate", bias_points, color(0))],
        ref_lines: vec![RefLine {
            y: 0.0,
            label: "unbiased".into(),
            dashed: false,
        }],
        x_categories: Some(categories.clone()),
    };
    let coverage = Chart {
        title: "Coverage of 95% intervals".into(),
        x_label: "estimator and working correlation".into(),
        y_label: "coverage".into(),
        series: methods
            .iter()
            .enumerate()
            .map(|(m, &method)| {
                let pts = keys
                    .iter()
                    .enumerate()
                    .filter_map(|(k, &(s, c))| {
                        reports
                            .iter()
                            .find(|r| r.estimator == s && r.correlation == c && r.method == method)
                            .map(|r| (k as f64, r.coverage))
                    })
                    .collect();
                Series::points(method.label(), pts, color(m + 1))
            })
            .collect(),
        ref_lines: vec![RefLine {
            y: 0.95,
            label: "nominal 0.95".into(),
            dashed: true,
        }],
        x_categories: Some(categories),
    };
    Figure {
        title: format!("Simulation summary: {name}"),
        panels: vec![bias, coverage],
        columns: 2,
    }
}

struct Estimated {
    analysis: AnalysisSpec,
    fit: FitResult,
    reports: Vec<(VarianceMethod, Option<VarianceReport>)>,
    criteria: Option<(f64, f64)>,
}

pub fn cmd_estimate(cfg: &RunConfig, data: &Path) -> Result<Outcome> {
    let panel = read_panel(data)?;
    estimate_panel(cfg, &panel)
}

pub fn estimate_panel(cfg: &RunConfig, panel: &Panel) -> Result<Outcome> {
    let mut results = Vec::new();
    let mut notes = String::new();
    for analysis in analyses(cfg) {
        let dm = design_matrix(&panel.design, analysis.structure, false)?;
        let fit = analysis.fit(&dm, &panel.means)?;
        let reports = analysis
            .methods
            .iter()
            .map(|&m| match variance_report(&fit, &dm, &panel.means, m) {
                Ok(r) => (m, Some(r)),
                Err(e) => {
                    let _ = writeln!(
                        notes,
                        "{} {}: {} unavailable: {e}",
                        analysis.structure.model_label(),
                        correlation_label(analysis.correlation),
                        m.label()
                    );
                    (m, None)
                }
            })
            .collect();
        let criteria = information_criteria(&fit, fit.n_obs()).ok();
        results.push(Estimated {
            analysis,
            fit,
            reports,
            criteria,
        });
    }

    let mut rows = Vec::new();
    for e in &results {
        for (m, r) in &e.reports {
            rows.push(vec![
                e.analysis.structure.model_label().into(),
                correlation_label(e.analysis.correlation).into(),
                e.analysis.structure.estimator_label().into(),
                m.label().into(),
                real(e.fit.estimate()),
                optional(r.as_ref().map(|r| r.se)),
                optional(r.as_ref().map(|r| r.ci_low)),
                optional(r.as_ref().map(|r| r.ci_high)),
                real(e.fit.gamma()),
                optional(e.criteria.map(|c| c.0)),
                optional(e.criteria.map(|c| c.1)),
            ]);
        }
    }
    let mut artifacts = Vec::new();
    if cfg.output.csv {
        artifacts.push(Artifact {
            name: ESTIMATES_CSV.into(),
            contents: csv_table(
                &[
                    "structure",
                    "correlation",
                    "estimator",
                    "method",
                    "point",
                    "se",
                    "ci_low",
                    "ci_high",
                    "gamma_hat",
                    "aic",
                    "bic",
                ],
                &rows,
            ),
        });
    }
    if cfg.output.svg {
        for &corr in &cfg.analysis.correlations {
            let fits: Vec<&Estimated> = results.iter().filter(|e| e.analysis.correlation == corr).collect();
            if let Some(fig) = effect_figure(corr, &fits, panel)? {
                artifacts.push(Artifact {
                    name: format!("effects-{}.svg", correlation_label(corr)),
                    contents: fig.render(),
                });
            }
        }
    }
    let mut summary = format!(
        "{} clusters, {} periods, cell size {}\n",
        panel.design.n_clusters(),
        panel.design.n_periods(),
        panel.design.cell_size()
    );
    for e in &results {
        let _ = writeln!(
            summary,
            "{:<4}{:<14}{:<7}{:>14}  gamma_hat {}",
            e.analysis.structure.model_label(),
            correlation_label(e.analysis.correlation),
            e.analysis.structure.estimator_label(),
            real(e.fit.estimate()),
            real(e.fit.gamma())
        );
    }
    summary.push_str(&notes);
    Ok(Outcome { artifacts, summary })
}

/// One panel per time-varying model: each effect with its interval from the
/// first available variance method, and the time-averaged estimate.
fn effect_figure(corr: CorrelationKind, fits: &[&Estimated], panel: &Panel) -> Result<Option<Figure>> {
    let mut panels = Vec::new();
    for e in fits.iter().filter(|e| e.analysis.structure != StructureKind::Immediate) {
        let dm = design_matrix(&panel.design, e.analysis.structure, false)?;
        let labels = e.fit.treatment_labels().to_vec();
        let p = e.fit.coefficients().len();
        let method = e.reports.iter().find(|(_, r)| r.is_some()).map(|(m, _)| *m);
        let mut band = Vec::new();
        if let Some(m) = method {
            let dof = m.default_dof(e.fit.n_clusters());
            for (k, &label) in labels.iter().enumerate() {
                let mut c = DVector::zeros(p);
                c[k] = 1.0;
                let r = contrast_report(&e.fit, &dm, &panel.means, m, dof, &c)?;
                band.push((label as f64, r.ci_low, r.ci_high));
            }
        }
        let points: Vec<(f64, f64)> = labels
            .iter()
            .zip(e.fit.treatment_effects())
            .map(|(&l, &v)| (l as f64, v))
            .collect();
        let mut series = Series::line("estimate", points, color(0));
        let ribbon_label = method.map(|m| format!(", 95% CI ({})", m.label())).unwrap_or_default();
        series.label = format!("estimate{ribbon_label}");
        series.ribbon = method.map(|_| band);
        let name = e.analysis.structure.estimator_label();
        panels.push(Chart {
            title: format!("{} model", e.analysis.structure.model_label()),
            x_label: match e.analysis.structure {
                StructureKind::ExposureVarying => "exposure time",
                _ => "calendar period",
            }
            .into(),
            y_label: "treatment effect".into(),
            series: vec![series],
            ref_lines: vec![
                RefLine {
                    y: 0.0,
                    label: String::new(),
                    dashed: false,
                },
                RefLine {
                    y: e.fit.estimate(),
                    label: format!("{name} {:.3}", e.fit.estimate()),
                    dashed: true,
                },
            ],
            x_categories: None,
        });
    }
    if panels.is_empty() {
        return Ok(None);
    }
    let columns = panels.len();
    Ok(Some(Figure {
        title: format!("Effect curves, {} working correlation", correlation_label(corr)),
        panels,
        columns,
    }))
}

pub fn cmd_design_info(cfg: &RunConfig) -> Result<Outcome> {
    let d = cfg
        .design
        .as_ref()
        .ok_or_else(|| CliError::Validation("design-info needs a [design] or [scenario] block".into()))?;
    Ok(Outcome {
        summary: design_summary(d),
        artifacts: if cfg.output.csv {
            vec![Artifact {
                name: DESIGN_CSV.into(),
                contents: design_table(d),
            }]
        } else {
            Vec::new()
        },
    })
}

fn design_summary(d: &DesignSpec) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "clusters {}  periods {}  cell size {}  sequences {}  clusters per sequence {}",
        d.n_clusters(),
        d.n_periods(),
        d.cell_size(),
        d.n_sequences(),
        d.clusters_per_sequence()
    );
    let _ = writeln!(
        s,
        "treated cluster-periods {} of {}",
        d.treated_cells(),
        d.n_clusters() * d.n_periods()
    );
    let _ = writeln!(s, "sequence  periods 1..{} (1 = treated)", d.n_periods());
    for q in 1..=d.n_sequences() {
        let row: String = (1..=d.n_periods()).map(|j| if j > q { " 1" } else { " 0" }).collect();
        let _ = writeln!(s, "{q:>8} {row}");
    }
    for (k, l) in StructureKind::ALL.iter().map(|k| (k, k.treatment_labels(d.n_periods()))) {
        let _ = writeln!(
            s,
            "{} model: {} treatment + {} period parameters",
            k.model_label(),
            l.len(),
            d.n_periods()
        );
    }
    s
}

fn design_table(d: &DesignSpec) -> String {
    let mut rows = Vec::new();
    for c in 0..d.n_clusters() {
        let q = d.sequence_of(c);
        for j in 1..=d.n_periods() {
            let exposure = j.saturating_sub(q);
            rows.push(vec![
                (c + 1).to_string(),
                q.to_string(),
                j.to_string(),
                u8::from(j > q).to_string(),
                exposure.to_string(),
            ]);
        }
    }
    csv_table(&["cluster", "sequence", "period", "treated", "exposure"], &rows)
}

/// Runs `command` with a validated configuration. `data` is required for
/// `estimate` and ignored otherwise. `design-info` accepts a configuration
/// written for any command.
pub fn run(command: Command, cfg: &RunConfig, data: Option<&Path>) -> Result<Outcome> {
    if let Some(c) = cfg.command {
        if c != command && command != Command::DesignInfo {
            return Err(CliError::Validation(format!(
                "configuration is for {:?} but {:?} was requested",
                c.label(),
                command.label()
            )));
        }
    }
    match command {
        Command::Weights => cmd_weights(cfg),
        Command::Simulate => cmd_simulate(cfg),
        Command::Estimate => {
            let data = data.ok_or_else(|| CliError::Validation("estimate needs --data <file>".into()))?;
            cmd_estimate(cfg, data)
        }
        Command::DesignInfo => cmd_design_info(cfg),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::parse_config;

    #[test]
    fn tables_use_lf_and_fixed_columns() {
        let t = csv_table(&["a", "b"], &[vec!["1".into(), "x,y".into()]]);
        assert_eq!(t, "a,b\n1,\"x,y\"\n");
    }

    #[test]
    fn w2_rows_are_uniform() {
        let cfg = parse_config("[weights]\nfamilies = [\"w2\"]\nsequences = [3]\ngammas = [0.0, 0.5]\n", "t").unwrap();
        let out = cmd_weights(&cfg).unwrap();
        let csv = &out.artifacts[0].contents;
        assert_eq!(
            csv,
            "family,Q,gamma,index,weight,scaled_weight\n\
             w2,3,0,2,0.5,1\nw2,3,0,3,0.5,1\nw2,3,0.5,2,0.5,1\nw2,3,0.5,3,0.5,1\n"
        );
        assert_eq!(out.artifacts[1].name, "weights-w2.svg");
    }

    #[test]
    fn command_mismatch_rejected() {
        let cfg = parse_config("command = \"simulate\"\n", "t").unwrap();
        assert!(matches!(run(Command::Weights, &cfg, None), Err(CliError::Validation(_))));
    }

    #[test]
    fn design_table_marks_exposure() {
        let cfg = parse_config("[design]\nclusters = 3\nperiods = 4\ncell_size = 2\n", "t").unwrap();
        let out = cmd_design_info(&cfg).unwrap();
        let csv = &out.artifacts[0].contents;
        assert!(csv.contains("\n1,1,4,1,3\n"));
        assert!(csv.contains("\n3,3,3,0,0\n"));
        assert!(out.summary.contains("treated cluster-periods 6 of 12"));
    }
}
