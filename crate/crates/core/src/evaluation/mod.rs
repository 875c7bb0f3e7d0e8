//! Ranking and retrieval metrics.
//!
//! Ties between equal scores are broken by ascending candidate id (byte
//! order), and a query with several ground-truth targets is ranked by its
//! best-placed one.

mod kernels;
pub(crate) mod report;
mod scoring;

pub use kernels::Packed;
pub use report::{
    aggregate_suite, round_half_up_2, Convention, MetricReport, MetricTable, FASHIONIQ_CATEGORIES,
};
pub use scoring::{score_matrix, score_prepared, PreparedGallery, PreparedQuery, ScoreMatrix};

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::Write;

use serde::Serialize;

use crate::datasets::{Dataset, Split, TripletSet};
use crate::error::{Error, Result};
use crate::head::{Flavor, HeadParams};

/// Cutoffs reported for full-gallery recall.
pub const RECALL_KS: [usize; 4] = [1, 5, 10, 50];
/// Cutoffs reported for subset recall.
pub const SUBSET_KS: [usize; 3] = [1, 2, 3];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QuerySpec {
    pub ref_id: String,
    pub mod_id: String,
    pub ground_truth: BTreeSet<String>,
    pub subset_members: Option<Vec<String>>,
    pub exclude_ref: bool,
    pub category: Option<String>,
}

impl QuerySpec {
    pub fn new(ref_id: &str, mod_id: &str, target: &str) -> Self {
        Self {
            ref_id: ref_id.to_string(),
            mod_id: mod_id.to_string(),
            ground_truth: BTreeSet::from([target.to_string()]),
            subset_members: None,
            exclude_ref: false,
            category: None,
        }
    }
}

/// Queries of `split`: records sharing `(ref, mod)` merge into one query with
/// several ground-truth targets. Order follows first appearance.
pub fn build_queries(triplets: &TripletSet, split: Split, exclude_ref: bool) -> Vec<QuerySpec> {
    let mut out: Vec<QuerySpec> = Vec::new();
    let mut seen: HashMap<(&str, &str), usize> = HashMap::new();
    for idx in triplets.indices(split) {
        let rec = &triplets.records[idx];
        let subset = triplets.subsets.get(&idx).cloned();
        match seen.get(&(rec.ref_id.as_str(), rec.mod_id.as_str())) {
            Some(&q) => {
                out[q].ground_truth.insert(rec.tgt_id.clone());
                if out[q].subset_members.is_none() {
                    out[q].subset_members = subset;
                }
            }
            None => {
                seen.insert((&rec.ref_id, &rec.mod_id), out.len());
                out.push(QuerySpec {
                    ref_id: rec.ref_id.clone(),
                    mod_id: rec.mod_id.clone(),
                    ground_truth: BTreeSet::from([rec.tgt_id.clone()]),
                    subset_members: subset,
                    exclude_ref,
                    category: rec.category.clone(),
                });
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RankResult {
    /// Candidate positions sorted by descending score.
    pub order: Vec<usize>,
    /// 1-based position of the best-placed ground-truth item.
    pub rank: usize,
}

fn before(scores: &[f64], ids: &[String], a: usize, b: usize) -> Ordering {
    scores[b]
        .total_cmp(&scores[a])
        .then_with(|| ids[a].cmp(&ids[b]))
}

fn eligible<'a>(candidates: &'a [String], query: &'a QuerySpec) -> impl Fn(usize) -> bool + 'a {
    move |k| !(query.exclude_ref && candidates[k] == query.ref_id)
}

/// Sorts the candidates of one score row and locates the ground truth.
pub fn rank_targets(row: &[f64], candidates: &[String], query: &QuerySpec) -> Result<RankResult> {
    if row.len() != candidates.len() {
        return Err(Error::shape(format!(
            "{} scores for {} candidates",
            row.len(),
            candidates.len()
        )));
    }
    let keep = eligible(candidates, query);
    let mut order: Vec<usize> = (0..candidates.len()).filter(|&k| keep(k)).collect();
    order.sort_by(|&a, &b| before(row, candidates, a, b));
    let rank = order
        .iter()
        .position(|&k| query.ground_truth.contains(&candidates[k]))
        .ok_or_else(|| missing_truth(query))?;
    Ok(RankResult {
        order,
        rank: rank + 1,
    })
}

fn missing_truth(query: &QuerySpec) -> Error {
    Error::UnknownId {
        id: query
            .ground_truth
            .iter()
            .next()
            .cloned()
            .unwrap_or_default(),
        line: None,
    }
}

/// Rank of the best ground-truth item among `pool` (candidate positions),
/// in linear time.
fn rank_within(
    row: &[f64],
    candidates: &[String],
    query: &QuerySpec,
    pool: &[usize],
) -> Result<usize> {
    let keep = eligible(candidates, query);
    let mut best: Option<usize> = None;
    for &k in pool {
        if keep(k) && query.ground_truth.contains(&candidates[k]) {
            best = match best {
                Some(b) if before(row, candidates, b, k) != Ordering::Greater => Some(b),
                _ => Some(k),
            };
        }
    }
    let best = best.ok_or_else(|| missing_truth(query))?;
    let ahead = pool
        .iter()
        .filter(|&&k| k != best && keep(k) && before(row, candidates, k, best) == Ordering::Less)
        .count();
    Ok(ahead + 1)
}

/// Same rank as [`rank_targets`] without sorting the row.
pub fn best_rank(row: &[f64], candidates: &[String], query: &QuerySpec) -> Result<usize> {
    let pool: Vec<usize> = (0..candidates.len()).collect();
    rank_within(row, candidates, query, &pool)
}

/// Rank restricted to the query's candidate subset.
pub fn subset_rank(
    row: &[f64],
    candidates: &[String],
    query: &QuerySpec,
    query_index: usize,
) -> Result<usize> {
    let members = query
        .subset_members
        .as_ref()
        .ok_or(Error::MissingSubset { query: query_index })?;
    let position: HashMap<&str, usize> = candidates
        .iter()
        .enumerate()
        .map(|(k, id)| (id.as_str(), k))
        .collect();
    let pool = members
        .iter()
        .map(|id| {
            position
                .get(id.as_str())
                .copied()
                .ok_or_else(|| Error::UnknownId {
                    id: id.clone(),
                    line: None,
                })
        })
        .collect::<Result<Vec<_>>>()?;
    rank_within(row, candidates, query, &pool)
}

/// Percentage of ranks `<= k`.
pub fn recall_at_k(ranks: &[usize], k: usize) -> Result<f64> {
    if ranks.is_empty() {
        return Err(Error::EmptyInput("recall over no queries"));
    }
    if k == 0 {
        return Err(Error::Config("recall cutoff must be at least 1".into()));
    }
    let hits = ranks.iter().filter(|&&r| r <= k).count();
    Ok(100.0 * hits as f64 / ranks.len() as f64)
}

pub fn recall_subset_at_k(queries: &[QuerySpec], matrix: &ScoreMatrix, k: usize) -> Result<f64> {
    let ranks = queries
        .iter()
        .enumerate()
        .map(|(q, spec)| subset_rank(matrix.row(q), &matrix.gallery, spec, q))
        .collect::<Result<Vec<_>>>()?;
    recall_at_k(&ranks, k)
}

pub fn median_rank(ranks: &[usize]) -> Result<f64> {
    if ranks.is_empty() {
        return Err(Error::EmptyInput("median of no ranks"));
    }
    let mut sorted = ranks.to_vec();
    sorted.sort_unstable();
    let n = sorted.len();
    Ok(if n % 2 == 1 {
        sorted[n / 2] as f64
    } else {
        (sorted[n / 2 - 1] + sorted[n / 2]) as f64 / 2.0
    })
}

/// Knobs shared by every evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalOptions {
    pub convention: Convention,
    pub exclude_ref: bool,
    /// Worker threads for scoring; 0 = all cores.
    pub threads: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            convention: Convention::Shoes,
            exclude_ref: false,
            threads: 1,
        }
    }
}

/// Full-precision result of one evaluation.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub queries: Vec<QuerySpec>,
    pub matrix: ScoreMatrix,
    pub ranks: Vec<usize>,
    pub report: MetricReport,
}

fn recall_cells(ranks: &[usize]) -> Result<BTreeMap<String, f64>> {
    let mut cells = BTreeMap::new();
    for k in RECALL_KS {
        cells.insert(format!("R@{k}"), recall_at_k(ranks, k)?);
    }
    cells.insert("median_rank".to_string(), median_rank(ranks)?);
    Ok(cells)
}

/// Scores, ranks and summarizes one split.
pub fn evaluate(
    dataset: &Dataset,
    split: Split,
    params: &HeadParams,
    flavor: Flavor,
    options: &EvalOptions,
) -> Result<Evaluation> {
    let queries = build_queries(&dataset.triplets, split, options.exclude_ref);
    if queries.is_empty() {
        return Err(Error::EmptySplit(split.to_string()));
    }
    let matrix = score_matrix(&queries, dataset, params, flavor, options.threads)?;
    let ranks = queries
        .iter()
        .enumerate()
        .map(|(q, spec)| best_rank(matrix.row(q), &matrix.gallery, spec))
        .collect::<Result<Vec<_>>>()?;

    let mut metrics = recall_cells(&ranks)?;
    if queries.iter().all(|q| q.subset_members.is_some()) {
        for k in SUBSET_KS {
            metrics.insert(format!("Rs@{k}"), recall_subset_at_k(&queries, &matrix, k)?);
        }
    }

    let mut categories: MetricTable = BTreeMap::new();
    let mut by_category: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (q, spec) in queries.iter().enumerate() {
        if let Some(c) = &spec.category {
            by_category.entry(c).or_default().push(ranks[q]);
        }
    }
    for (c, r) in by_category {
        categories.insert(c.to_string(), recall_cells(&r)?);
    }

    let mut table = categories.clone();
    table.insert("all".to_string(), metrics.clone());
    let aggregate = options.convention.aggregate(&table)?;
    let report = MetricReport {
        convention: options.convention,
        split: split.to_string(),
        flavor,
        queries: queries.len(),
        metrics,
        categories,
        aggregate,
    };
    Ok(Evaluation {
        queries,
        matrix,
        ranks,
        report,
    })
}

#[derive(Serialize)]
struct RankingLine<'a> {
    query: usize,
    #[serde(rename = "ref")]
    ref_id: &'a str,
    #[serde(rename = "mod")]
    mod_id: &'a str,
    rank: usize,
    top: Vec<(&'a str, f64)>,
}

impl Evaluation {
    /// One JSON line per query with its top-`k` candidates and scores.
    pub fn write_rankings(&self, k: usize, out: &mut impl Write) -> Result<()> {
        for (q, spec) in self.queries.iter().enumerate() {
            let row = self.matrix.row(q);
            let ranked = rank_targets(row, &self.matrix.gallery, spec)?;
            let top = ranked
                .order
                .iter()
                .take(k)
                .map(|&c| (self.matrix.gallery[c].as_str(), row[c]))
                .collect();
            let line = RankingLine {
                query: q,
                ref_id: &spec.ref_id,
                mod_id: &spec.mod_id,
                rank: ranked.rank,
                top,
            };
            serde_json::to_writer(&mut *out, &line)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ids(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("id{i}")).collect()
    }

    #[test]
    fn rank_examples() {
        let c = ids(3);
        let q = QuerySpec::new("r", "m", "id0");
        let r = rank_targets(&[0.9, 0.1, 0.5], &c, &q).unwrap();
        assert_eq!(r.rank, 1);
        assert_eq!(r.order, vec![0, 2, 1]);

        let q = QuerySpec::new("r", "m", "id2");
        assert_eq!(rank_targets(&[0.4, 0.4, 0.4], &c, &q).unwrap().rank, 3);
        assert_eq!(best_rank(&[0.4, 0.4, 0.4], &c, &q).unwrap(), 3);
    }

    #[test]
    fn exclude_reference_and_multi_truth() {
        let c = ids(4);
        let mut q = QuerySpec::new("id0", "m", "id3");
        q.ground_truth.insert("id2".into());
        let row = [1.0, 0.2, 0.5, 0.7];
        assert_eq!(rank_targets(&row, &c, &q).unwrap().rank, 2);
        q.exclude_ref = true;
        let r = rank_targets(&row, &c, &q).unwrap();
        assert_eq!(r.rank, 1);
        assert_eq!(r.order.len(), 3);
        assert_eq!(best_rank(&row, &c, &q).unwrap(), 1);
    }

    #[test]
    fn missing_ground_truth_is_an_error() {
        let q = QuerySpec::new("r", "m", "elsewhere");
        assert!(rank_targets(&[0.1, 0.2], &ids(2), &q).is_err());
        assert!(best_rank(&[0.1, 0.2], &ids(2), &q).is_err());
    }

    #[test]
    fn recall_and_median_examples() {
        let ranks = [1, 5, 12, 60];
        assert_eq!(recall_at_k(&ranks, 10).unwrap(), 50.0);
        assert_eq!(recall_at_k(&ranks, 50).unwrap(), 75.0);
        assert_eq!(recall_at_k(&ranks, 60).unwrap(), 100.0);
        assert!(matches!(recall_at_k(&[], 1), Err(Error::EmptyInput(_))));
        assert_eq!(median_rank(&[1, 2, 3]).unwrap(), 2.0);
        assert_eq!(median_rank(&ranks).unwrap(), 8.5);
        assert_eq!(median_rank(&[7]).unwrap(), 7.0);
        assert!(median_rank(&[]).is_err());
    }

    #[test]
    fn subset_rank_counts_only_members() {
        let c = ids(6);
        let mut q = QuerySpec::new("r", "m", "id4");
        q.subset_members = Some(vec!["id1".into(), "id4".into(), "id5".into()]);
        let row = [0.9, 0.8, 0.95, 0.1, 0.7, 0.2];
        assert_eq!(best_rank(&row, &c, &q).unwrap(), 4);
        assert_eq!(subset_rank(&row, &c, &q, 0).unwrap(), 2);
        let matrix = ScoreMatrix {
            gallery: c.clone(),
            rows: 1,
            values: row.to_vec(),
        };
        assert_eq!(
            recall_subset_at_k(std::slice::from_ref(&q), &matrix, 1).unwrap(),
            0.0
        );
        assert_eq!(
            recall_subset_at_k(std::slice::from_ref(&q), &matrix, 2).unwrap(),
            100.0
        );
        q.subset_members = None;
        assert!(matches!(
            recall_subset_at_k(&[q], &matrix, 1),
            Err(Error::MissingSubset { query: 0 })
        ));
    }

    #[test]
    fn queries_group_by_reference_and_modifier() {
        use crate::datasets::TripletRecord;
        let rec = |r: &str, m: &str, t: &str, s| TripletRecord {
            ref_id: r.into(),
            mod_id: m.into(),
            tgt_id: t.into(),
            split: s,
            category: None,
        };
        let set = TripletSet {
            records: vec![
                rec("a", "x", "t1", Split::Val),
                rec("b", "x", "t2", Split::Val),
                rec("a", "x", "t3", Split::Val),
                rec("a", "x", "t4", Split::Test),
            ],
            subsets: BTreeMap::new(),
        };
        let qs = build_queries(&set, Split::Val, true);
        assert_eq!(qs.len(), 2);
        assert_eq!(qs[0].ground_truth.len(), 2);
        assert!(qs[0].exclude_ref);
        assert_eq!(build_queries(&set, Split::Test, false).len(), 1);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn recall_monotone_and_bounded(ranks in prop::collection::vec(1usize..200, 1..50)) {
                let mut prev = 0.0;
                for k in 1..=200 {
                    let r = recall_at_k(&ranks, k).unwrap();
                    prop_assert!((0.0..=100.0).contains(&r));
                    prop_assert!(r >= prev);
                    prev = r;
                }
                prop_assert_eq!(prev, 100.0);
            }

            #[test]
            fn ranking_invariant_under_increasing_transform(
                row in prop::collection::vec(-1.0f64..1.0, 2..60),
                target in 0usize..60,
            ) {
                let c = ids(row.len());
                let q = QuerySpec::new("r", "m", &c[target % row.len()]);
                let base = rank_targets(&row, &c, &q).unwrap();
                let mapped: Vec<f64> = row.iter().map(|v| (3.0 * v).exp() + 2.0).collect();
                prop_assert_eq!(&rank_targets(&mapped, &c, &q).unwrap(), &base);
                prop_assert_eq!(best_rank(&row, &c, &q).unwrap(), base.rank);
            }
        }
    }
}
