//! Dataset conventions, aggregate metrics and report emission.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use crate::error::{Error, Result};
use crate::head::Flavor;

/// Row name -> metric name -> value. The whole split is the row `"all"`;
/// per-category rows are named after the category.
pub type MetricTable = BTreeMap<String, BTreeMap<String, f64>>;

/// Garment categories averaged by the FashionIQ challenge metric.
pub const FASHIONIQ_CATEGORIES: [&str; 3] = ["dress", "shirt", "toptee"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Convention {
    /// Mean of R@10 and R@50 over dress, shirt and toptee.
    Fashioniq,
    /// Mean of R@1, R@10 and R@50.
    Shoes,
    /// Mean of R@5 and Rs@1.
    Cirr,
}

impl Convention {
    pub fn name(self) -> &'static str {
        match self {
            Convention::Fashioniq => "fashioniq",
            Convention::Shoes => "shoes",
            Convention::Cirr => "cirr",
        }
    }

    /// Metric cells the aggregate reads, as `(row, metric)`.
    pub fn required_cells(self) -> Vec<(&'static str, &'static str)> {
        match self {
            Convention::Fashioniq => FASHIONIQ_CATEGORIES
                .iter()
                .flat_map(|c| [(*c, "R@10"), (*c, "R@50")])
                .collect(),
            Convention::Shoes => vec![("all", "R@1"), ("all", "R@10"), ("all", "R@50")],
            Convention::Cirr => vec![("all", "R@5"), ("all", "Rs@1")],
        }
    }

    /// Full-precision aggregate; round with [`round_half_up_2`] for display.
    pub fn aggregate(self, table: &MetricTable) -> Result<f64> {
        let cells = self.required_cells();
        let mut sum = 0.0;
        for (row, metric) in &cells {
            sum += table
                .get(*row)
                .and_then(|r| r.get(*metric))
                .copied()
                .ok_or_else(|| Error::MissingCell {
                    category: row.to_string(),
                    metric: metric.to_string(),
                })?;
        }
        Ok(sum / cells.len() as f64)
    }
}

impl fmt::Display for Convention {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Convention {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fashioniq" => Ok(Convention::Fashioniq),
            "shoes" => Ok(Convention::Shoes),
            "cirr" => Ok(Convention::Cirr),
            other => Err(Error::Config(format!(
                "unknown convention `{other}` (fashioniq, shoes, cirr)"
            ))),
        }
    }
}

/// Rounds to two decimals, halves away from negative infinity.
///
/// Values within 1e-9 of a half-cent boundary count as on it, so inputs like
/// 43.045 (stored as 43.04499999...) round up.
pub fn round_half_up_2(x: f64) -> f64 {
    let scaled = x * 100.0;
    let snapped = (scaled * 1e6).round() / 1e6;
    let base = if (scaled - snapped).abs() <= 1e-9 * scaled.abs().max(1.0) {
        snapped
    } else {
        scaled
    };
    (base + 0.5).floor() / 100.0
}

/// Aggregate computed straight from a table, rounded for emission.
pub fn aggregate_suite(table: &MetricTable, convention: Convention) -> Result<f64> {
    convention.aggregate(table).map(round_half_up_2)
}

/// Metrics of one flavor on one split. Values are kept at full precision
/// and rounded when serialized or printed.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub convention: Convention,
    pub split: String,
    pub flavor: Flavor,
    pub queries: usize,
    pub metrics: BTreeMap<String, f64>,
    pub categories: MetricTable,
    pub aggregate: f64,
}

/// Display order of metric columns; unknown names follow alphabetically.
pub(crate) fn metric_order(name: &str) -> (usize, String) {
    const ORDER: [&str; 8] = [
        "R@1",
        "R@5",
        "R@10",
        "R@50",
        "median_rank",
        "Rs@1",
        "Rs@2",
        "Rs@3",
    ];
    (
        ORDER.iter().position(|k| *k == name).unwrap_or(ORDER.len()),
        name.to_string(),
    )
}

fn rounded(cells: &BTreeMap<String, f64>) -> Value {
    let map: Map<String, Value> = cells
        .iter()
        .map(|(k, v)| (k.clone(), json!(round_half_up_2(*v))))
        .collect();
    Value::Object(map)
}

impl MetricReport {
    /// Value used for checkpoint selection.
    pub fn selection_metric(&self) -> f64 {
        self.aggregate
    }

    pub fn to_json(&self) -> Value {
        let categories: Map<String, Value> = self
            .categories
            .iter()
            .map(|(c, m)| (c.clone(), rounded(m)))
            .collect();
        json!({
            "aggregate": round_half_up_2(self.aggregate),
            "categories": categories,
            "convention": self.convention.name(),
            "flavor": self.flavor.name(),
            "metrics": rounded(&self.metrics),
            "queries": self.queries,
            "split": self.split,
        })
    }

    /// Pretty JSON with a trailing newline.
    pub fn to_json_string(&self) -> String {
        let mut s = serde_json::to_string_pretty(&self.to_json()).expect("report serializes");
        s.push('\n');
        s
    }

    /// Aligned text table: one row for the whole split plus one per category.
    pub fn to_table(&self) -> String {
        let mut columns: Vec<&String> = self.metrics.keys().collect();
        columns.sort_by_key(|k| metric_order(k));
        let mut rows: Vec<(String, &BTreeMap<String, f64>)> =
            vec![("all".to_string(), &self.metrics)];
        rows.extend(self.categories.iter().map(|(c, m)| (c.clone(), m)));

        let header: Vec<String> = std::iter::once("split".to_string())
            .chain(columns.iter().map(|c| c.to_string()))
            .collect();
        let mut lines = vec![header];
        for (name, cells) in rows {
            let mut line = vec![name];
            for c in &columns {
                line.push(
                    cells
                        .get(*c)
                        .map(|v| format!("{:.2}", round_half_up_2(*v)))
                        .unwrap_or_else(|| "-".into()),
                );
            }
            lines.push(line);
        }
        let mut out = format!(
            "{} on {} ({} queries), {} aggregate {:.2}\n",
            self.flavor,
            self.split,
            self.queries,
            self.convention,
            round_half_up_2(self.aggregate)
        );
        out.push_str(&align(&lines));
        out
    }
}

/// Left-aligns the first column and right-aligns the rest.
pub(crate) fn align(lines: &[Vec<String>]) -> String {
    let cols = lines.iter().map(Vec::len).max().unwrap_or(0);
    let widths: Vec<usize> = (0..cols)
        .map(|c| {
            lines
                .iter()
                .filter_map(|l| l.get(c))
                .map(String::len)
                .max()
                .unwrap_or(0)
        })
        .collect();
    let mut out = String::new();
    for line in lines {
        let cells: Vec<String> = line
            .iter()
            .enumerate()
            .map(|(c, s)| {
                if c == 0 {
                    format!("{s:<w$}", w = widths[c])
                } else {
                    format!("{s:>w$}", w = widths[c])
                }
            })
            .collect();
        out.push_str(cells.join("  ").trim_end());
        out.push('\n');
    }
    out
}
