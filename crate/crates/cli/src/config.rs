//! Run configuration: a TOML document parsed into an all-optional raw form,
//! then validated into [`RunConfig`] with every default filled in.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use swcrt_core::correlation::{CorrelationKind, CorrelationSpec};
use swcrt_core::design::{DesignSpec, StructureKind, TreatmentStructure};
use swcrt_core::dgp::{ScenarioSpec, PRESET_NAMES};
use swcrt_core::mc::DEFAULT_BASE_SEED;
use swcrt_core::variance::VarianceMethod;
use swcrt_core::weights::WeightFamily;

use crate::error::{CliError, Result};

pub const DEFAULT_N_REPS: usize = 1000;
pub const DEFAULT_SEQUENCES: [usize; 3] = [3, 5, 9];
pub const DEFAULT_GAMMAS: [f64; 5] = [0.0, 0.25, 0.5, 0.75, 0.9];
pub const DEFAULT_METHODS: [VarianceMethod; 3] =
    [VarianceMethod::ModelBased, VarianceMethod::CR2, VarianceMethod::CR3];
pub const DEFAULT_OUTPUT_DIR: &str = "swcrt-out";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    Weights,
    Simulate,
    Estimate,
    DesignInfo,
}

impl Command {
    pub fn label(self) -> &'static str {
        match self {
            Command::Weights => "weights",
            Command::Simulate => "simulate",
            Command::Estimate => "estimate",
            Command::DesignInfo => "design-info",
        }
    }
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    command: Option<Command>,
    #[serde(skip_serializing_if = "Option::is_none")]
    design: Option<RawDesign>,
    #[serde(skip_serializing_if = "Option::is_none")]
    scenario: Option<RawScenario>,
    #[serde(skip_serializing_if = "Option::is_none")]
    analysis: Option<RawAnalysis>,
    #[serde(skip_serializing_if = "Option::is_none")]
    mc: Option<RawMc>,
    #[serde(skip_serializing_if = "Option::is_none")]
    weights: Option<RawWeights>,
    #[serde(skip_serializing_if = "Option::is_none")]
    output: Option<RawOutput>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawDesign {
    clusters: usize,
    periods: usize,
    cell_size: usize,
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawScenario {
    #[serde(skip_serializing_if = "Option::is_none")]
    name: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    preset: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    theta: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    delta: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    xi: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    period_effects: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    correlation: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    tau_alpha_sq: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    tau_omega_sq: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    sigma_e_sq: Option<f64>,
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawAnalysis {
    structures: Option<Vec<String>>,
    correlations: Option<Vec<String>>,
    variance_methods: Option<Vec<String>>,
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawMc {
    n_reps: Option<usize>,
    base_seed: Option<u64>,
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawWeights {
    families: Option<Vec<String>>,
    sequences: Option<Vec<usize>>,
    gammas: Option<Vec<f64>>,
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawOutput {
    directory: Option<String>,
    formats: Option<Vec<String>>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ScenarioSource {
    Preset(String),
    Explicit,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioConfig {
    pub source: ScenarioSource,
    /// Seed equals `mc.base_seed`.
    pub spec: ScenarioSpec,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnalysisConfig {
    pub structures: Vec<StructureKind>,
    pub correlations: Vec<CorrelationKind>,
    pub methods: Vec<VarianceMethod>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct McConfig {
    pub n_reps: usize,
    pub base_seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WeightsConfig {
    pub families: Vec<WeightFamily>,
    pub sequences: Vec<usize>,
    pub gammas: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OutputConfig {
    pub directory: PathBuf,
    pub csv: bool,
    pub svg: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub command: Option<Command>,
    /// The scenario's design when a scenario is given.
    pub design: Option<DesignSpec>,
    pub scenario: Option<ScenarioConfig>,
    pub analysis: AnalysisConfig,
    pub mc: McConfig,
    pub weights: WeightsConfig,
    pub output: OutputConfig,
}

fn invalid(msg: impl Into<String>) -> CliError {
    CliError::Validation(msg.into())
}

fn parse_labels<T>(
    field: &str,
    values: Option<Vec<String>>,
    default: Vec<T>,
    parse: impl Fn(&str) -> Option<T>,
) -> Result<Vec<T>> {
    let Some(values) = values else {
        return Ok(default);
    };
    if values.is_empty() {
        return Err(invalid(format!("{field} must not be empty")));
    }
    values
        .iter()
        .map(|v| parse(v).ok_or_else(|| invalid(format!("{field}: unknown value {v:?}"))))
        .collect()
}

fn correlation_kind(label: &str) -> Option<CorrelationKind> {
    match label {
        "nested" => Some(CorrelationKind::NestedExchangeable),
        other => CorrelationKind::from_label(other),
    }
}

fn correlation_label(kind: CorrelationKind) -> &'static str {
    match kind {
        CorrelationKind::NestedExchangeable => "nested",
        other => other.label(),
    }
}

fn validate_scenario(raw: RawScenario, design: Option<DesignSpec>, seed: u64) -> Result<ScenarioConfig> {
    let explicit_vectors =
        raw.theta.is_some() || raw.delta.is_some() || raw.xi.is_some() || raw.period_effects.is_some();
    let mut spec = match &raw.preset {
        Some(name) => {
            if explicit_vectors {
                return Err(invalid(
                    "scenario: give either a preset or explicit effect vectors, not both",
                ));
            }
            if !PRESET_NAMES.contains(&name.as_str()) {
                return Err(invalid(format!(
                    "scenario.preset: unknown preset {name:?} (expected one of {})",
                    PRESET_NAMES.join(", ")
                )));
            }
            let spec = match design {
                Some(d) => ScenarioSpec::preset_with_design(name, d, seed),
                None => ScenarioSpec::preset(name, seed),
            };
            spec.map_err(|e| invalid(format!("scenario.preset {name:?}: {e}")))?
        }
        None => {
            let design = design.ok_or_else(|| invalid("scenario: explicit vectors need a [design] block"))?;
            let structure = match (raw.theta, raw.delta.clone(), raw.xi.clone()) {
                (Some(theta), None, None) => TreatmentStructure::Immediate { theta },
                (None, Some(delta), None) => TreatmentStructure::ExposureVarying { delta },
                (None, None, Some(xi)) => TreatmentStructure::CalendarVarying { xi },
                (None, None, None) => {
                    return Err(invalid("scenario: give a preset or exactly one of theta, delta, xi"))
                }
                _ => return Err(invalid("scenario: give exactly one of theta, delta, xi")),
            };
            let period_effects = raw
                .period_effects
                .clone()
                .unwrap_or_else(|| vec![0.0; design.n_periods()]);
            ScenarioSpec {
                name: raw.name.clone().unwrap_or_else(|| "custom".into()),
                design,
                structure,
                period_effects,
                correlation: CorrelationSpec::exchangeable(0.0, 1.0),
                seed,
            }
        }
    };
    if raw.preset.is_some() {
        if let Some(name) = &raw.name {
            spec.name = name.clone();
        }
    }
    let kind = match &raw.correlation {
        Some(label) => correlation_kind(label)
            .ok_or_else(|| invalid(format!("scenario.correlation: unknown value {label:?}")))?,
        None => spec.correlation.kind,
    };
    let base = spec.correlation;
    let sigma = raw.sigma_e_sq.unwrap_or(base.sigma_e_sq);
    let tau = raw.tau_alpha_sq.unwrap_or(base.tau_alpha_sq);
    let omega = raw.tau_omega_sq.unwrap_or(base.tau_omega_sq);
    if raw.preset.is_none() && kind != CorrelationKind::Independence && raw.tau_alpha_sq.is_none() {
        return Err(invalid("scenario.tau_alpha_sq is required for a correlated scenario"));
    }
    if raw.preset.is_none() && raw.sigma_e_sq.is_none() {
        return Err(invalid("scenario.sigma_e_sq is required"));
    }
    spec.correlation = match kind {
        CorrelationKind::Exchangeable => CorrelationSpec::exchangeable(tau, sigma),
        CorrelationKind::NestedExchangeable => {
            if raw.tau_omega_sq.is_none() {
                return Err(invalid("scenario.tau_omega_sq is required for a nested scenario"));
            }
            CorrelationSpec::nested(tau, omega, sigma)
        }
        CorrelationKind::Independence => CorrelationSpec::independence(sigma),
    };
    spec.validate().map_err(|e| invalid(format!("scenario: {e}")))?;
    let source = match raw.preset {
        Some(name) => ScenarioSource::Preset(name),
        None => ScenarioSource::Explicit,
    };
    Ok(ScenarioConfig { source, spec })
}

fn validate(raw: RawConfig) -> Result<RunConfig> {
    let design = match raw.design {
        Some(d) => Some(
            DesignSpec::new(d.clusters, d.periods, d.cell_size).map_err(|e| invalid(format!("design: {e}")))?,
        ),
        None => None,
    };
    let mc_raw = raw.mc.unwrap_or_default();
    let mc = McConfig {
        n_reps: mc_raw.n_reps.unwrap_or(DEFAULT_N_REPS),
        base_seed: mc_raw.base_seed.unwrap_or(DEFAULT_BASE_SEED),
    };
    if mc.n_reps == 0 {
        return Err(invalid("mc.n_reps must be at least 1"));
    }
    let scenario = match raw.scenario {
        Some(s) => Some(validate_scenario(s, design.clone(), mc.base_seed)?),
        None => None,
    };
    let design = scenario.as_ref().map(|s| s.spec.design.clone()).or(design);

    let a = raw.analysis.unwrap_or_default();
    let analysis = AnalysisConfig {
        structures: parse_labels(
            "analysis.structures",
            a.structures,
            StructureKind::ALL.to_vec(),
            StructureKind::from_label,
        )?,
        correlations: parse_labels(
            "analysis.correlations",
            a.correlations,
            vec![CorrelationKind::Exchangeable, CorrelationKind::Independence],
            correlation_kind,
        )?,
        methods: parse_labels(
            "analysis.variance_methods",
            a.variance_methods,
            DEFAULT_METHODS.to_vec(),
            VarianceMethod::from_label,
        )?,
    };

    let w = raw.weights.unwrap_or_default();
    let weights = WeightsConfig {
        families: parse_labels("weights.families", w.families, WeightFamily::ALL.to_vec(), WeightFamily::from_label)?,
        sequences: w.sequences.unwrap_or_else(|| DEFAULT_SEQUENCES.to_vec()),
        gammas: w.gammas.unwrap_or_else(|| DEFAULT_GAMMAS.to_vec()),
    };
    if weights.sequences.is_empty() {
        return Err(invalid("weights.sequences must not be empty"));
    }
    if let Some(q) = weights.sequences.iter().find(|&&q| q < 2) {
        return Err(invalid(format!("weights.sequences: need at least 2 sequences, got {q}")));
    }
    if weights.gammas.is_empty() {
        return Err(invalid("weights.gammas must not be empty"));
    }
    if let Some(g) = weights.gammas.iter().find(|g| !(0.0..1.0).contains(*g)) {
        return Err(invalid(format!("weights.gammas: {g} is outside [0, 1)")));
    }

    let o = raw.output.unwrap_or_default();
    let formats = o.formats.unwrap_or_else(|| vec!["csv".into(), "svg".into()]);
    if formats.is_empty() {
        return Err(invalid("output.formats must not be empty"));
    }
    if let Some(f) = formats.iter().find(|f| *f != "csv" && *f != "svg") {
        return Err(invalid(format!("output.formats: unknown format {f:?}")));
    }
    let output = OutputConfig {
        directory: PathBuf::from(o.directory.unwrap_or_else(|| DEFAULT_OUTPUT_DIR.into())),
        csv: formats.iter().any(|f| f == "csv"),
        svg: formats.iter().any(|f| f == "svg"),
    };

    Ok(RunConfig {
        command: raw.command,
        design,
        scenario,
        analysis,
        mc,
        weights,
        output,
    })
}

/// Parses and validates a configuration document. `origin` names the
/// source in error messages.
pub fn parse_config(text: &str, origin: &str) -> Result<RunConfig> {
    let raw: RawConfig = toml::from_str(text).map_err(|e| CliError::Parse {
        path: origin.to_string(),
        message: e.to_string(),
    })?;
    validate(raw)
}

pub fn load_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    parse_config(&text, &path.display().to_string())
}

impl RunConfig {
    /// Configuration with no file: defaults only.
    pub fn defaults() -> Self {
        validate(RawConfig::default()).expect("defaults are valid")
    }

    /// A document that parses back to an equal configuration.
    pub fn to_toml(&self) -> String {
        let scenario = self.scenario.as_ref().map(|s| {
            let c = &s.spec.correlation;
            let mut raw = RawScenario {
                name: Some(s.spec.name.clone()),
                correlation: Some(correlation_label(c.kind).into()),
                sigma_e_sq: Some(c.sigma_e_sq),
                ..Default::default()
            };
            if c.kind != CorrelationKind::Independence {
                raw.tau_alpha_sq = Some(c.tau_alpha_sq);
            }
            if c.kind == CorrelationKind::NestedExchangeable {
                raw.tau_omega_sq = Some(c.tau_omega_sq);
            }
            match &s.source {
                ScenarioSource::Preset(name) => raw.preset = Some(name.clone()),
                ScenarioSource::Explicit => {
                    match &s.spec.structure {
                        TreatmentStructure::Immediate { theta } => raw.theta = Some(*theta),
                        TreatmentStructure::ExposureVarying { delta } => raw.delta = Some(delta.clone()),
                        TreatmentStructure::CalendarVarying { xi } => raw.xi = Some(xi.clone()),
                    }
                    raw.period_effects = Some(s.spec.period_effects.clone());
                }
            }
            raw
        });
        let mut formats = Vec::new();
        if self.output.csv {
            formats.push("csv".to_string());
        }
        if self.output.svg {
            formats.push("svg".to_string());
        }
        let raw = RawConfig {
            command: self.command,
            design: self.design.as_ref().map(|d| RawDesign {
                clusters: d.n_clusters(),
                periods: d.n_periods(),
                cell_size: d.cell_size(),
            }),
            scenario,
            analysis: Some(RawAnalysis {
                structures: Some(self.analysis.structures.iter().map(|s| s.model_label().into()).collect()),
                correlations: Some(self.analysis.correlations.iter().map(|c| correlation_label(*c).into()).collect()),
                variance_methods: Some(self.analysis.methods.iter().map(|m| m.label().into()).collect()),
            }),
            mc: Some(RawMc {
                n_reps: Some(self.mc.n_reps),
                base_seed: Some(self.mc.base_seed),
            }),
            weights: Some(RawWeights {
                families: Some(self.weights.families.iter().map(|f| f.label().into()).collect()),
                sequences: Some(self.weights.sequences.clone()),
                gammas: Some(self.weights.gammas.clone()),
            }),
            output: Some(RawOutput {
                directory: Some(self.output.directory.display().to_string()),
                formats: Some(formats),
            }),
        };
        toml::to_string(&raw).expect("configuration serializes")
    }

    /// Replaces the base seed everywhere it is used.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.mc.base_seed = seed;
        if let Some(s) = &mut self.scenario {
            s.spec.seed = seed;
        }
        self
    }

    pub fn with_output_dir(mut self, dir: PathBuf) -> Self {
        self.output.directory = dir;
        self
    }
}
