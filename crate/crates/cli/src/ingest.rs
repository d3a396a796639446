//! Trial data files: individual rows (`cluster, period, outcome`) or
//! cluster-period summaries (`cluster, period, mean, n`), each with a
//! `sequence` or `treated` column fixing the crossover.
//!
//! Panels must be complete and balanced: every cluster observed in every
//! period `1..=J` with the same cell size.

use std::collections::HashMap;
use std::path::Path;

use nalgebra::DMatrix;
use swcrt_core::design::DesignSpec;
use swcrt_core::dgp::TrialData;

use crate::error::{CliError, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Panel {
    pub design: DesignSpec,
    /// `I x J` cluster-period means, clusters in order of first appearance.
    pub means: DMatrix<f64>,
    pub cluster_ids: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Layout {
    Individual,
    Aggregated,
}

struct Columns {
    cluster: usize,
    period: usize,
    layout: Layout,
    value: usize,
    n: Option<usize>,
    sequence: Option<usize>,
    treated: Option<usize>,
}

#[derive(Default, Clone)]
struct Cell {
    /// Running sum of outcomes, or the given mean for summary rows.
    sum: f64,
    count: usize,
    rows: usize,
    treated: Option<bool>,
}

fn schema(origin: &str, message: impl Into<String>) -> CliError {
    CliError::Schema {
        path: origin.into(),
        message: message.into(),
    }
}

fn unbalanced(origin: &str, message: impl Into<String>) -> CliError {
    CliError::UnbalancedPanel {
        path: origin.into(),
        message: message.into(),
    }
}

fn locate(headers: &csv::StringRecord, origin: &str) -> Result<Columns> {
    let find = |name: &str| headers.iter().position(|h| h.trim().eq_ignore_ascii_case(name));
    let require = |name: &str| find(name).ok_or_else(|| schema(origin, format!("missing required column {name:?}")));
    let cluster = require("cluster")?;
    let period = require("period")?;
    let (layout, value, n) = match (find("outcome"), find("mean"), find("n")) {
        (Some(v), None, _) => (Layout::Individual, v, None),
        (None, Some(v), Some(n)) => (Layout::Aggregated, v, Some(n)),
        (None, Some(_), None) => return Err(schema(origin, "column \"mean\" needs a cell size column \"n\"")),
        (Some(_), Some(_), _) => return Err(schema(origin, "give either \"outcome\" or \"mean\", not both")),
        (None, None, _) => return Err(schema(origin, "missing required column \"outcome\" (or \"mean\" and \"n\")")),
    };
    let sequence = find("sequence");
    let treated = find("treated");
    if sequence.is_none() && treated.is_none() {
        return Err(schema(origin, "missing column \"sequence\" or \"treated\""));
    }
    Ok(Columns {
        cluster,
        period,
        layout,
        value,
        n,
        sequence,
        treated,
    })
}

fn field<'a>(rec: &'a csv::StringRecord, k: usize, line: u64, origin: &str) -> Result<&'a str> {
    rec.get(k)
        .map(str::trim)
        .ok_or_else(|| schema(origin, format!("line {line}: too few fields")))
}

fn parse_num<T: std::str::FromStr>(s: &str, what: &str, line: u64, origin: &str) -> Result<T> {
    s.parse()
        .map_err(|_| schema(origin, format!("line {line}: cannot read {what} from {s:?}")))
}

fn parse_flag(s: &str, line: u64, origin: &str) -> Result<bool> {
    match s.to_ascii_lowercase().as_str() {
        "1" | "true" => Ok(true),
        "0" | "false" => Ok(false),
        _ => Err(schema(origin, format!("line {line}: treated must be 0 or 1, got {s:?}"))),
    }
}

/// Parses a panel from CSV text. `origin` names the source in errors.
pub fn parse_panel(text: &str, origin: &str) -> Result<Panel> {
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(text.as_bytes());
    let headers = reader
        .headers()
        .map_err(|e| schema(origin, format!("cannot read header: {e}")))?
        .clone();
    let cols = locate(&headers, origin)?;

    let mut ids: Vec<String> = Vec::new();
    let mut index: HashMap<String, usize> = HashMap::new();
    let mut cells: HashMap<(usize, usize), Cell> = HashMap::new();
    let mut sequences: HashMap<usize, usize> = HashMap::new();
    let mut max_period = 0;

    for rec in reader.records() {
        let rec = rec.map_err(|e| schema(origin, e.to_string()))?;
        let line = rec.position().map_or(0, |p| p.line());
        let id = field(&rec, cols.cluster, line, origin)?.to_string();
        let c = *index.entry(id.clone()).or_insert_with(|| {
            ids.push(id);
            ids.len() - 1
        });
        let j: usize = parse_num(field(&rec, cols.period, line, origin)?, "period", line, origin)?;
        if j == 0 {
            return Err(schema(origin, format!("line {line}: periods are numbered from 1")));
        }
        max_period = max_period.max(j);
        let v: f64 = parse_num(field(&rec, cols.value, line, origin)?, "value", line, origin)?;
        if !v.is_finite() {
            return Err(schema(origin, format!("line {line}: non-finite value")));
        }
        let cell = cells.entry((c, j)).or_default();
        match cols.layout {
            Layout::Individual => {
                cell.sum += v;
                cell.count += 1;
            }
            Layout::Aggregated => {
                let n: usize = parse_num(field(&rec, cols.n.unwrap(), line, origin)?, "n", line, origin)?;
                if n == 0 {
                    return Err(schema(origin, format!("line {line}: cell size must be positive")));
                }
                cell.sum = v;
                cell.count = n;
            }
        }
        cell.rows += 1;
        if cols.layout == Layout::Aggregated && cell.rows > 1 {
            return Err(schema(origin, format!("line {line}: second row for cluster {:?} period {j}", ids[c])));
        }
        if let Some(k) = cols.sequence {
            let q: usize = parse_num(field(&rec, k, line, origin)?, "sequence", line, origin)?;
            if *sequences.entry(c).or_insert(q) != q {
                return Err(schema(origin, format!("line {line}: cluster {:?} changes sequence", ids[c])));
            }
        }
        if let Some(k) = cols.treated {
            let t = parse_flag(field(&rec, k, line, origin)?, line, origin)?;
            if *cell.treated.get_or_insert(t) != t {
                return Err(schema(
                    origin,
                    format!("line {line}: mixed treatment within cluster {:?} period {j}", ids[c]),
                ));
            }
        }
    }
    if ids.is_empty() {
        return Err(schema(origin, "no data rows"));
    }

    let (n_clusters, n_periods) = (ids.len(), max_period);
    let mut size = None;
    for (c, id) in ids.iter().enumerate() {
        for j in 1..=n_periods {
            let cell = cells
                .get(&(c, j))
                .ok_or_else(|| unbalanced(origin, format!("cluster {id:?} has no observations in period {j}")))?;
            match size {
                None => size = Some(cell.count),
                Some(k) if k != cell.count => {
                    return Err(unbalanced(
                        origin,
                        format!("cluster {id:?} period {j} has {} observations, expected {k}", cell.count),
                    ))
                }
                _ => {}
            }
        }
    }
    let cell_size = size.unwrap();

    let mut assignment = Vec::with_capacity(n_clusters);
    for (c, id) in ids.iter().enumerate() {
        let from_flags = match cols.treated {
            Some(_) => {
                let flags: Vec<bool> = (1..=n_periods).map(|j| cells[&(c, j)].treated.unwrap()).collect();
                let q = flags.iter().take_while(|t| !**t).count();
                if flags[q..].iter().any(|t| !t) {
                    return Err(schema(origin, format!("cluster {id:?} leaves treatment after starting it")));
                }
                Some(q)
            }
            None => None,
        };
        let q = match (sequences.get(&c), from_flags) {
            (Some(&q), Some(f)) if q != f => {
                return Err(schema(
                    origin,
                    format!("cluster {id:?}: sequence {q} disagrees with treatment starting in period {}", f + 1),
                ))
            }
            (Some(&q), _) => q,
            (None, Some(f)) => f,
            (None, None) => unreachable!("a crossover column is required"),
        };
        if q == 0 || q >= n_periods {
            return Err(schema(
                origin,
                format!("cluster {id:?}: sequence {q} outside 1..={}", n_periods.saturating_sub(1)),
            ));
        }
        assignment.push(q);
    }
    let design = DesignSpec::with_assignment(n_periods, cell_size, assignment)
        .map_err(|e| unbalanced(origin, format!("design: {e}")))?;
    let means = DMatrix::from_fn(n_clusters, n_periods, |c, j| {
        let cell = &cells[&(c, j + 1)];
        match cols.layout {
            Layout::Individual => cell.sum / cell.count as f64,
            Layout::Aggregated => cell.sum,
        }
    });
    Ok(Panel {
        design,
        means,
        cluster_ids: ids,
    })
}

pub fn read_panel(path: &Path) -> Result<Panel> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    parse_panel(&text, &path.display().to_string())
}

/// Individual-level export with `cluster, sequence, period, outcome`.
/// Values are written at full precision so that they read back exactly.
pub fn export_individual(design: &DesignSpec, data: &TrialData) -> String {
    let mut out = String::from("cluster,sequence,period,outcome\n");
    for c in 0..data.n_clusters() {
        for j in 1..=data.n_periods() {
            for &y in data.cell(c, j) {
                out.push_str(&format!("{},{},{},{}\n", c + 1, design.sequence_of(c), j, y));
            }
        }
    }
    out
}

/// Cluster-period export with `cluster, period, treated, mean, n`, at
/// full precision.
pub fn export_means(design: &DesignSpec, means: &DMatrix<f64>) -> String {
    let mut out = String::from("cluster,period,treated,mean,n\n");
    for c in 0..means.nrows() {
        let q = design.sequence_of(c);
        for j in 1..=means.ncols() {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                c + 1,
                j,
                u8::from(j > q),
                means[(c, j - 1)],
                design.cell_size()
            ));
        }
    }
    out
}
