//! Six-flavor ablation: identical training and evaluation per flavor.

use serde_json::{json, Value};

use crate::datasets::{Dataset, Split};
use crate::error::Result;
use crate::evaluation::{evaluate, report::align, round_half_up_2, EvalOptions, MetricReport};
use crate::head::Flavor;
use crate::training::{train, TrainConfig};

#[derive(Debug, Clone)]
pub struct AblationRow {
    pub flavor: Flavor,
    pub report: MetricReport,
    /// Mean loss of the last epoch.
    pub final_loss: f64,
}

#[derive(Debug, Clone)]
pub struct AblationReport {
    pub split: Split,
    /// One row per flavor in [`Flavor::ALL`] order.
    pub rows: Vec<AblationRow>,
}

impl AblationReport {
    pub fn row(&self, flavor: Flavor) -> &AblationRow {
        self.rows
            .iter()
            .find(|r| r.flavor == flavor)
            .expect("every flavor has a row")
    }

    /// Full-precision metric of one flavor.
    pub fn metric(&self, flavor: Flavor, name: &str) -> Option<f64> {
        self.row(flavor).report.metrics.get(name).copied()
    }

    pub fn to_json(&self) -> Value {
        let rows: Vec<Value> = self
            .rows
            .iter()
            .map(|r| {
                let mut v = r.report.to_json();
                v["final_loss"] = json!(r.final_loss);
                v
            })
            .collect();
        json!({ "split": self.split.name(), "rows": rows })
    }

    /// One line per flavor: R@1, R@10, R@50, median rank and the aggregate.
    pub fn to_table(&self) -> String {
        let columns = ["R@1", "R@10", "R@50", "median_rank"];
        let mut lines = vec![std::iter::once("flavor")
            .chain(columns)
            .chain(["aggregate"])
            .map(String::from)
            .collect::<Vec<_>>()];
        for row in &self.rows {
            let mut line = vec![row.flavor.name().to_string()];
            for c in columns {
                let v = row.report.metrics.get(c).copied();
                line.push(
                    v.map(|v| format!("{:.2}", round_half_up_2(v)))
                        .unwrap_or_else(|| "-".into()),
                );
            }
            line.push(format!("{:.2}", round_half_up_2(row.report.aggregate)));
            lines.push(line);
        }
        align(&lines)
    }
}

/// Trains every flavor with the same config (only the flavor changes) and
/// evaluates the final parameters on `split`.
pub fn run_ablation(
    dataset: &Dataset,
    config: &TrainConfig,
    eval: &EvalOptions,
    split: Split,
    mut progress: impl FnMut(Flavor, &MetricReport),
) -> Result<AblationReport> {
    let mut rows = Vec::with_capacity(Flavor::ALL.len());
    for flavor in Flavor::ALL {
        let cfg = TrainConfig {
            flavor,
            ..config.clone()
        };
        let outcome = train(dataset, &cfg, eval)?;
        let report = evaluate(dataset, split, &outcome.params, flavor, eval)?.report;
        progress(flavor, &report);
        let final_loss = outcome.logs.last().map(|l| l.loss).unwrap_or(f64::NAN);
        rows.push(AblationRow {
            flavor,
            report,
            final_loss,
        });
    }
    Ok(AblationReport { split, rows })
}
