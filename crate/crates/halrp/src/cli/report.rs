//! Results emission: CSV rows per task, a JSON summary mirroring them plus
//! selected ranks, and the order-sweep table.

use std::collections::BTreeMap;

use serde::Serialize;

use crate::cl_engine::RunReport;
use crate::error::Result;

/// Per-task CSV. The leading comment line states the bwt convention; columns
/// are task_index, tasks_seen, one accuracy column per task (blank until the
/// task is seen), avg_accuracy, bwt, increment_ratio, wall_ms.
pub fn results_csv(report: &RunReport) -> String {
    let t = report.rows.len();
    let mut out = String::new();
    out.push_str(&format!("# {}\n", report.bwt_definition));
    out.push_str("task_index,tasks_seen");
    for j in 0..t {
        out.push_str(&format!(",acc_{j}"));
    }
    out.push_str(",avg_accuracy,bwt,increment_ratio,wall_ms\n");
    for row in &report.rows {
        out.push_str(&format!("{},{}", row.task_index, row.tasks_seen));
        for j in 0..t {
            match row.accuracies.get(j) {
                Some(a) => out.push_str(&format!(",{a}")),
                None => out.push(','),
            }
        }
        out.push_str(&format!(
            ",{},{},{},{}\n",
            row.avg_accuracy, row.bwt, row.increment_ratio, row.wall_ms
        ));
    }
    out
}

#[derive(Serialize)]
struct Summary<'a> {
    config: &'a str,
    report: &'a RunReport,
}

/// JSON summary: the effective config text plus the full report (accuracy
/// rows, selected ranks per layer per task, warnings, prune events).
pub fn summary_json(config_text: &str, report: &RunReport) -> Result<String> {
    let summary = Summary {
        config: config_text,
        report,
    };
    let mut s = serde_json::to_string_pretty(&summary)
        .map_err(|e| crate::error::Error::InvalidInput(e.to_string()))?;
    s.push('\n');
    Ok(s)
}

/// Outcome of an order sweep.
#[derive(Debug, Serialize)]
pub struct OrdersOutcome {
    pub orders: Vec<Vec<usize>>,
    pub per_task_opd: BTreeMap<usize, f64>,
    pub mopd: f64,
    pub aopd: f64,
    pub final_avg_accuracies: Vec<f64>,
}

pub fn orders_csv(outcome: &OrdersOutcome) -> String {
    let mut out = String::from("task_id,opd\n");
    for (task, opd) in &outcome.per_task_opd {
        out.push_str(&format!("{task},{opd}\n"));
    }
    out.push_str(&format!("MOPD,{}\n", outcome.mopd));
    out.push_str(&format!("AOPD,{}\n", outcome.aopd));
    out
}

pub fn orders_json(outcome: &OrdersOutcome) -> Result<String> {
    let mut s = serde_json::to_string_pretty(outcome)
        .map_err(|e| crate::error::Error::InvalidInput(e.to_string()))?;
    s.push('\n');
    Ok(s)
}

/// Human-readable sweep table for stdout.
pub fn orders_table(outcome: &OrdersOutcome) -> String {
    let mut out = String::new();
    for (i, order) in outcome.orders.iter().enumerate() {
        let list = order
            .iter()
            .map(|v| v.to_string())
            .collect::<Vec<_>>()
            .join(",");
        out.push_str(&format!(
            "order {i}: [{list}]  final_avg_accuracy={}\n",
            outcome.final_avg_accuracies[i]
        ));
    }
    for (task, opd) in &outcome.per_task_opd {
        out.push_str(&format!("task {task}: OPD = {opd}\n"));
    }
    out.push_str(&format!(
        "MOPD = {}\nAOPD = {}\n",
        outcome.mopd, outcome.aopd
    ));
    out
}
