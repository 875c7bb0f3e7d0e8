//! Wall-clock latency of full-gallery scoring, split into phases.
//!
//! Phases per flavor: query-side encoding (attention and projection vectors,
//! or the normalized query), gallery precompute (norms or squared entries),
//! and the scoring loop over every query-target pair. Each repetition runs
//! the flavors back to back; min and median are taken over repetitions.

use std::time::Instant;

use serde::Serialize;
use serde_json::Value;

use crate::datasets::{Dataset, Split};
use crate::error::{Error, Result};
use crate::evaluation::{
    build_queries, report::align, score_prepared, PreparedGallery, PreparedQuery, QuerySpec,
};
use crate::head::{Flavor, HeadParams};

#[derive(Debug, Clone)]
pub struct BenchConfig {
    pub split: Split,
    pub repeats: usize,
    pub flavors: Vec<Flavor>,
    /// Worker threads for the scoring loop; 1 = sequential.
    pub threads: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            split: Split::Val,
            repeats: 5,
            flavors: vec![Flavor::LateFusion, Flavor::Artemis],
            threads: 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PhaseTiming {
    pub min: f64,
    pub median: f64,
}

impl PhaseTiming {
    fn from_samples(samples: &[f64]) -> Self {
        let mut s = samples.to_vec();
        s.sort_by(f64::total_cmp);
        let n = s.len();
        let median = if n % 2 == 1 {
            s[n / 2]
        } else {
            (s[n / 2 - 1] + s[n / 2]) / 2.0
        };
        Self { min: s[0], median }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FlavorTiming {
    pub flavor: Flavor,
    pub query_encode: PhaseTiming,
    pub gallery_precompute: PhaseTiming,
    pub scoring: PhaseTiming,
    pub total: PhaseTiming,
    /// Sum of all scores, so the work cannot be optimized away.
    pub checksum: f64,
}

/// Seconds per phase and flavor.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LatencyReport {
    pub split: String,
    pub queries: usize,
    pub gallery: usize,
    pub dim_image: usize,
    pub dim_text: usize,
    pub repeats: usize,
    pub flavors: Vec<FlavorTiming>,
}

impl LatencyReport {
    pub fn timing(&self, flavor: Flavor) -> Option<&FlavorTiming> {
        self.flavors.iter().find(|t| t.flavor == flavor)
    }

    /// Total time of `a` divided by that of `b`, as `(min, median)` ratios.
    pub fn ratio(&self, a: Flavor, b: Flavor) -> Option<(f64, f64)> {
        let (a, b) = (self.timing(a)?.total, self.timing(b)?.total);
        Some((a.min / b.min, a.median / b.median))
    }

    pub fn to_json(&self) -> Value {
        serde_json::to_value(self).expect("latency report serializes")
    }

    pub fn to_table(&self) -> String {
        let mut lines = vec![["flavor", "phase", "min_s", "median_s"]
            .map(String::from)
            .to_vec()];
        for t in &self.flavors {
            for (phase, p) in [
                ("query_encode", t.query_encode),
                ("gallery_precompute", t.gallery_precompute),
                ("scoring", t.scoring),
                ("total", t.total),
            ] {
                lines.push(vec![
                    t.flavor.name().into(),
                    phase.into(),
                    format!("{:.6}", p.min),
                    format!("{:.6}", p.median),
                ]);
            }
        }
        let mut out = format!(
            "{} queries x {} gallery, dims {}/{}, {} repeats\n",
            self.queries, self.gallery, self.dim_text, self.dim_image, self.repeats
        );
        out.push_str(&align(&lines));
        if let Some((min, median)) = self.ratio(Flavor::Artemis, Flavor::LateFusion) {
            out.push_str(&format!(
                "artemis / late_fusion total: min {min:.3}, median {median:.3}\n"
            ));
        }
        out
    }
}

struct Sample {
    encode: f64,
    precompute: f64,
    scoring: f64,
    checksum: f64,
}

fn run_once(
    queries: &[(&[f64], &[f64])],
    gallery_rows: &[&[f64]],
    dim: usize,
    params: &HeadParams,
    flavor: Flavor,
    threads: usize,
) -> Result<Sample> {
    let start = Instant::now();
    let prepared = PreparedQuery::batch(queries, params, flavor)?;
    let encode = start.elapsed().as_secs_f64();

    let start = Instant::now();
    let gallery = PreparedGallery::new(dim, gallery_rows.iter().copied(), flavor)?;
    let precompute = start.elapsed().as_secs_f64();

    let start = Instant::now();
    let rows = score_prepared(threads, &prepared, &gallery)?;
    let scoring = start.elapsed().as_secs_f64();
    let checksum = rows.iter().flatten().sum();
    Ok(Sample {
        encode,
        precompute,
        scoring,
        checksum,
    })
}

/// Times full-gallery scoring of `split` for each configured flavor.
pub fn bench_latency(
    dataset: &Dataset,
    params: &HeadParams,
    config: &BenchConfig,
) -> Result<LatencyReport> {
    if config.repeats == 0 {
        return Err(Error::Config("repeats must be at least 1".into()));
    }
    let specs: Vec<QuerySpec> = build_queries(&dataset.triplets, config.split, false);
    if specs.is_empty() {
        return Err(Error::EmptySplit(config.split.to_string()));
    }
    let queries = specs
        .iter()
        .map(|q| {
            Ok((
                dataset.images.require(&q.ref_id)?,
                dataset.modifiers.require(&q.mod_id)?,
            ))
        })
        .collect::<Result<Vec<_>>>()?;
    let gallery_rows = dataset
        .gallery
        .iter()
        .map(|id| dataset.images.require(id))
        .collect::<Result<Vec<_>>>()?;
    let dim = dataset.images.dim();

    let mut samples: Vec<Vec<Sample>> = config.flavors.iter().map(|_| Vec::new()).collect();
    for _ in 0..config.repeats {
        for (f, &flavor) in config.flavors.iter().enumerate() {
            samples[f].push(run_once(
                &queries,
                &gallery_rows,
                dim,
                params,
                flavor,
                config.threads,
            )?);
        }
    }

    let flavors = config
        .flavors
        .iter()
        .zip(&samples)
        .map(|(&flavor, s)| {
            let phase = |f: fn(&Sample) -> f64| {
                PhaseTiming::from_samples(&s.iter().map(f).collect::<Vec<_>>())
            };
            FlavorTiming {
                flavor,
                query_encode: phase(|x| x.encode),
                gallery_precompute: phase(|x| x.precompute),
                scoring: phase(|x| x.scoring),
                total: phase(|x| x.encode + x.precompute + x.scoring),
                checksum: s[0].checksum,
            }
        })
        .collect();
    Ok(LatencyReport {
        split: config.split.to_string(),
        queries: specs.len(),
        gallery: gallery_rows.len(),
        dim_image: dim,
        dim_text: dataset.modifiers.dim(),
        repeats: config.repeats,
        flavors,
    })
}
