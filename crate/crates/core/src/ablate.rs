//! Ablation grids: partial configs merged over a base config, trained and
//! evaluated cell by cell, rendered as a comparison table.

use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalReport};
use crate::kgraph::{load_graph, ConceptGraph};
use crate::training::{train, TrainConfig};
use serde::{Deserialize, Serialize};
use std::path::Path;

/// One grid cell: a name, a partial train-config override, and optionally a
/// different concept graph.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GridCell {
    pub name: String,
    #[serde(default)]
    pub overrides: serde_json::Value,
    /// Path to a graph manifest overriding the default, relative to the grid
    /// file (resolved by the caller).
    #[serde(default)]
    pub graph: Option<String>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CellResult {
    pub name: String,
    pub report: EvalReport,
}

/// Recursive JSON merge: override objects merge key-wise, everything else
/// replaces.
pub fn merge_config(base: &serde_json::Value, overrides: &serde_json::Value) -> serde_json::Value {
    match (base, overrides) {
        (b, serde_json::Value::Null) => b.clone(),
        (serde_json::Value::Object(b), serde_json::Value::Object(o)) => {
            let mut merged = b.clone();
            for (k, v) in o {
                let entry = merged.get(k).cloned().unwrap_or(serde_json::Value::Null);
                merged.insert(k.clone(), merge_config(&entry, v));
            }
            serde_json::Value::Object(merged)
        }
        (_, v) => v.clone(),
    }
}

/// Applies a cell's overrides to the base config.
pub fn cell_config(base: &TrainConfig, cell: &GridCell) -> Result<TrainConfig> {
    let base_value =
        serde_json::to_value(base).map_err(|e| Error::json("base config", e))?;
    let merged = merge_config(&base_value, &cell.overrides);
    let cfg: TrainConfig = serde_json::from_value(merged)
        .map_err(|e| Error::config(format!("cell '{}': {e}", cell.name)))?;
    cfg.validate()?;
    Ok(cfg)
}

/// Trains and evaluates every cell sequentially. Each cell gets its own
/// subdirectory under `out_dir`.
pub fn run_grid(
    base: &TrainConfig,
    cells: &[GridCell],
    manifest_path: &Path,
    default_graph: &ConceptGraph,
    graph_base_dir: &Path,
    out_dir: &Path,
) -> Result<Vec<CellResult>> {
    let mut results = Vec::with_capacity(cells.len());
    for cell in cells {
        let cfg = cell_config(base, cell)?;
        let graph = match &cell.graph {
            Some(rel) => load_graph(&graph_base_dir.join(rel))?,
            None => default_graph.clone(),
        };
        let cell_dir = out_dir.join(sanitize(&cell.name));
        let outputs = train(&cfg, manifest_path, &graph, &cell_dir)?;
        let (report, _) = evaluate(
            &outputs.checkpoint_bin,
            &outputs.checkpoint_json,
            manifest_path,
            &graph,
            false,
        )?;
        results.push(CellResult { name: cell.name.clone(), report });
    }
    Ok(results)
}

fn sanitize(name: &str) -> String {
    name.chars().map(|c| if c.is_alphanumeric() || c == '-' { c } else { '_' }).collect()
}

/// Fixed-width comparison table, one row per configuration.
pub fn render_table(results: &[CellResult]) -> String {
    let name_width = results.iter().map(|r| r.name.len()).max().unwrap_or(4).max(13);
    let mut out = format!(
        "{:<width$}  {:>7}  {:>7}  {:>7}  {:>7}\n",
        "Configuration",
        "R@0.3",
        "R@0.5",
        "R@0.7",
        "mIoU",
        width = name_width
    );
    for r in results {
        let at = |k: &str| r.report.r_at.get(k).copied().unwrap_or(f64::NAN);
        out.push_str(&format!(
            "{:<width$}  {:>7.2}  {:>7.2}  {:>7.2}  {:>7.2}\n",
            r.name,
            at("0.3"),
            at("0.5"),
            at("0.7"),
            r.report.miou,
            width = name_width
        ));
    }
    out
}
