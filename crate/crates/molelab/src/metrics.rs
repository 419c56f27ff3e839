//! Post-hoc analysis of routing traces: activated-expert counts, strategy
//! mix, per-round loss statistics, and lossless CSV/JSON export.
//!
//! Floats are rendered with 17 significant decimal digits so every numeric
//! field survives an export/import round trip exactly.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::routing::Strategy;

/// Routing outcome of one token at one layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub token_id: usize,
    pub layer_id: usize,
    pub entropy_norm: f64,
    pub strategy: Strategy,
    /// Selected expert indices, ascending.
    pub selected: Vec<usize>,
    /// Full-length mixture weights; zero outside `selected`.
    pub weights: Vec<f64>,
    /// Most confidently routed expert: argmax of the raw distribution.
    pub argmax_expert: usize,
}

/// Ordered routing records of an evaluation pass.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RoutingTrace {
    pub records: Vec<TraceRecord>,
}

impl RoutingTrace {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

/// Mean number of activated experts per layer, keyed by layer id.
pub fn avg_activated(trace: &RoutingTrace) -> Result<BTreeMap<usize, f64>> {
    if trace.is_empty() {
        return Err(Error::Usage("avg_activated on an empty trace".into()));
    }
    let mut sums: BTreeMap<usize, (usize, usize)> = BTreeMap::new();
    for r in &trace.records {
        let entry = sums.entry(r.layer_id).or_insert((0, 0));
        entry.0 += r.selected.len();
        entry.1 += 1;
    }
    Ok(sums
        .into_iter()
        .map(|(layer, (total, count))| (layer, total as f64 / count as f64))
        .collect())
}

/// Fractions of routing strategies over a trace; they sum to 1.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StrategyMix {
    pub soft: f64,
    pub top_p: f64,
    pub top_k_fallback: f64,
}

pub fn strategy_mix(trace: &RoutingTrace) -> Result<StrategyMix> {
    if trace.is_empty() {
        return Err(Error::Usage("strategy_mix on an empty trace".into()));
    }
    let total = trace.len() as f64;
    let mut soft = 0.0;
    let mut top_p = 0.0;
    let mut top_k_fallback = 0.0;
    for r in &trace.records {
        match r.strategy {
            Strategy::Soft => soft += 1.0,
            Strategy::TopP => top_p += 1.0,
            Strategy::TopKFallback => top_k_fallback += 1.0,
        }
    }
    Ok(StrategyMix {
        soft: soft / total,
        top_p: top_p / total,
        top_k_fallback: top_k_fallback / total,
    })
}

/// Mean and population standard deviation of one reporting window.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundStat {
    pub mean: f64,
    pub std: f64,
    pub len: usize,
    /// False for a trailing window shorter than the round length.
    pub complete: bool,
}

/// Windowed statistics over consecutive disjoint rounds. A trailing partial
/// window is reported too, flagged `complete: false`.
pub fn round_stats(losses: &[f64], round_length: usize) -> Result<Vec<RoundStat>> {
    if round_length == 0 {
        return Err(Error::Usage("round_length must be ≥ 1".into()));
    }
    if losses.is_empty() {
        return Err(Error::Usage("round_stats on empty input".into()));
    }
    Ok(losses
        .chunks(round_length)
        .map(|chunk| {
            let n = chunk.len() as f64;
            let mean = chunk.iter().sum::<f64>() / n;
            let var = chunk.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            RoundStat {
                mean,
                std: var.sqrt(),
                len: chunk.len(),
                complete: chunk.len() == round_length,
            }
        })
        .collect())
}

/// Export target format.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExportFormat {
    Csv,
    Json,
}

impl FromStr for ExportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "csv" => Ok(ExportFormat::Csv),
            "json" => Ok(ExportFormat::Json),
            other => Err(Error::Usage(format!("unknown format '{other}'"))),
        }
    }
}

/// Render a float with 17 significant digits; parses back to the same bits.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

const TRACE_HEADER: &str =
    "token_id,layer_id,entropy_norm,strategy,n_selected,argmax_expert,weights";

/// JSON envelope of an exported trace: the records plus an optional echo of
/// the experiment configuration that produced them.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TraceFile {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub config: Option<serde_json::Value>,
    pub records: Vec<TraceRecord>,
}

/// Write a trace to `path` in the given format.
///
/// CSV columns: `token_id, layer_id, entropy_norm, strategy, n_selected,
/// argmax_expert, weights` with weights semicolon-joined over all N experts;
/// the selected set is exactly the nonzero support of the weights. JSON
/// mirrors the same fields one object per record, wrapped with the config
/// echo when one is provided.
pub fn export_trace(
    trace: &RoutingTrace,
    format: ExportFormat,
    path: &Path,
    config_echo: Option<serde_json::Value>,
) -> Result<()> {
    match format {
        ExportFormat::Csv => {
            let mut out = String::from(TRACE_HEADER);
            out.push('\n');
            for r in &trace.records {
                let weights: Vec<String> = r.weights.iter().map(|&w| fmt_f64(w)).collect();
                out.push_str(&format!(
                    "{},{},{},{},{},{},{}\n",
                    r.token_id,
                    r.layer_id,
                    fmt_f64(r.entropy_norm),
                    r.strategy,
                    r.selected.len(),
                    r.argmax_expert,
                    weights.join(";")
                ));
            }
            fs::write(path, out).map_err(|e| Error::io(path, e))
        }
        ExportFormat::Json => {
            let file = TraceFile {
                config: config_echo,
                records: trace.records.clone(),
            };
            let json =
                serde_json::to_string_pretty(&file).map_err(|e| Error::Serde(e.to_string()))?;
            fs::write(path, json).map_err(|e| Error::io(path, e))
        }
    }
}

const REPORT_STEP_HEADER: &str =
    "step,total_loss,task_loss,aux_loss,mean_entropy_norm,soft_count,top_p_count,top_k_fallback_count";

/// Write a training report to `path`. JSON carries the full report (config,
/// steps, rounds, entropy endpoints, trace); CSV is the per-step table with
/// the documented header, one row per step (header-only when there are no
/// steps).
pub fn export_report(
    report: &crate::trainer::TrainReport,
    format: ExportFormat,
    path: &Path,
) -> Result<()> {
    match format {
        ExportFormat::Csv => {
            let mut out = String::from(REPORT_STEP_HEADER);
            out.push('\n');
            for s in &report.steps {
                out.push_str(&format!(
                    "{},{},{},{},{},{},{},{}\n",
                    s.step,
                    fmt_f64(s.total_loss),
                    fmt_f64(s.task_loss),
                    fmt_f64(s.aux_loss),
                    fmt_f64(s.mean_entropy_norm),
                    s.soft_count,
                    s.top_p_count,
                    s.top_k_fallback_count
                ));
            }
            fs::write(path, out).map_err(|e| Error::io(path, e))
        }
        ExportFormat::Json => {
            let json =
                serde_json::to_string_pretty(report).map_err(|e| Error::Serde(e.to_string()))?;
            fs::write(path, json).map_err(|e| Error::io(path, e))
        }
    }
}

/// Read a trace back from a file written by [`export_trace`].
pub fn import_trace(format: ExportFormat, path: &Path) -> Result<RoutingTrace> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    match format {
        ExportFormat::Csv => {
            let mut lines = text.lines();
            let header = lines
                .next()
                .ok_or_else(|| Error::Usage(format!("{}: empty trace file", path.display())))?;
            if header != TRACE_HEADER {
                return Err(Error::Usage(format!(
                    "{}: unexpected header '{header}'",
                    path.display()
                )));
            }
            let mut records = Vec::new();
            for (lineno, line) in lines.enumerate() {
                if line.is_empty() {
                    continue;
                }
                let fields: Vec<&str> = line.split(',').collect();
                if fields.len() != 7 {
                    return Err(Error::Usage(format!(
                        "{}: line {}: expected 7 fields, got {}",
                        path.display(),
                        lineno + 2,
                        fields.len()
                    )));
                }
                let parse_usize = |s: &str| {
                    s.parse::<usize>()
                        .map_err(|e| Error::Usage(format!("bad count '{s}': {e}")))
                };
                let parse_f64 = |s: &str| {
                    s.parse::<f64>()
                        .map_err(|e| Error::Usage(format!("bad float '{s}': {e}")))
                };
                let weights: Vec<f64> =
                    fields[6].split(';').map(parse_f64).collect::<Result<_>>()?;
                let selected: Vec<usize> = weights
                    .iter()
                    .enumerate()
                    .filter(|(_, &w)| w != 0.0)
                    .map(|(i, _)| i)
                    .collect();
                let n_selected = parse_usize(fields[4])?;
                if selected.len() != n_selected {
                    return Err(Error::Usage(format!(
                        "{}: line {}: n_selected {} but weight support is {}",
                        path.display(),
                        lineno + 2,
                        n_selected,
                        selected.len()
                    )));
                }
                records.push(TraceRecord {
                    token_id: parse_usize(fields[0])?,
                    layer_id: parse_usize(fields[1])?,
                    entropy_norm: parse_f64(fields[2])?,
                    strategy: fields[3].parse()?,
                    selected,
                    weights,
                    argmax_expert: parse_usize(fields[5])?,
                });
            }
            Ok(RoutingTrace { records })
        }
        ExportFormat::Json => {
            let file: TraceFile =
                serde_json::from_str(&text).map_err(|e| Error::Serde(e.to_string()))?;
            Ok(RoutingTrace {
                records: file.records,
            })
        }
    }
}
