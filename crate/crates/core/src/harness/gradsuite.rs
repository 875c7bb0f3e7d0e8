//! Seeded finite-difference checks of every analytic gradient the head uses.
//!
//! Each instance draws a head (Glorot weights plus small random biases and
//! temperature) and unit-norm inputs, then checks the gradient with respect
//! to all head parameters of the implicit similarity score, the explicit
//! matching score, and the batch loss under every flavor.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::error::Result;
use crate::evaluation::{PreparedGallery, PreparedQuery};
use crate::head::{score, score_em, score_is, Flavor, HeadDims, HeadParams, HeadVars};
use crate::numerics::{finite_diff_check, l2_normalize, GradCheckConfig, ScalarFunction, Tape};
use crate::training::{bbc_loss, bbc_loss_from_scores, Triplet};

#[derive(Debug, Clone)]
pub struct GradSuiteConfig {
    /// `text = image = hidden` width.
    pub dims: usize,
    pub instances: usize,
    /// Triplets per loss batch.
    pub batch: usize,
    pub seed: u64,
    pub h: f64,
    pub tol: f64,
    /// Coordinates sampled per parameter block; `None` checks all of them.
    pub per_block: Option<usize>,
}

impl Default for GradSuiteConfig {
    fn default() -> Self {
        Self {
            dims: 8,
            instances: 100,
            batch: 4,
            seed: 0,
            h: 1e-5,
            tol: 1e-4,
            per_block: None,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct SuiteEntry {
    pub instance: usize,
    pub function: String,
    pub coordinates: usize,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub failures: usize,
    pub passed: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradSuiteReport {
    pub dims: usize,
    pub instances: usize,
    pub entries: Vec<SuiteEntry>,
    pub passed: bool,
    pub seconds: f64,
}

impl GradSuiteReport {
    pub fn failures(&self) -> impl Iterator<Item = &SuiteEntry> {
        self.entries.iter().filter(|e| !e.passed)
    }

    /// Names of the checked functions, each listed once.
    pub fn functions(&self) -> Vec<&str> {
        let mut names: Vec<&str> = Vec::new();
        for e in &self.entries {
            if !names.contains(&e.function.as_str()) {
                names.push(&e.function);
            }
        }
        names
    }
}

fn unit(rng: &mut ChaCha8Rng, n: usize) -> Result<Vec<f64>> {
    let v: Vec<f64> = (0..n).map(|_| StandardNormal.sample(rng)).collect();
    l2_normalize(&v)
}

fn instance_params(dims: HeadDims, rng: &mut ChaCha8Rng) -> Result<HeadParams> {
    let mut params = HeadParams::init(dims, rng.gen())?;
    let lens = HeadParams::block_lens(dims);
    let mut flat = params.to_flat();
    let mut offset = 0;
    for (block, len) in lens.iter().enumerate() {
        // Odd blocks are biases (b1, b2 of each attention, then the projection bias).
        if block % 2 == 1 {
            for v in &mut flat[offset..offset + len] {
                *v = rng.gen_range(-0.1..0.1);
            }
        }
        offset += len;
    }
    *flat.last_mut().expect("gamma") = rng.gen_range(1.0..10.0);
    params.set_flat(&flat)?;
    Ok(params)
}

fn sample_coordinates(dims: HeadDims, per_block: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut coords = Vec::new();
    let mut offset = 0;
    for len in HeadParams::block_lens(dims).into_iter().chain([1]) {
        for i in rand::seq::index::sample(rng, len, per_block.min(len)).into_iter() {
            coords.push(offset + i);
        }
        offset += len;
    }
    coords.sort_unstable();
    coords
}

/// A single pair score as a function of the flat head parameters.
struct PairScore<'a> {
    dims: HeadDims,
    flavor: Flavor,
    r: &'a [f64],
    m: &'a [f64],
    t: &'a [f64],
}

impl ScalarFunction for PairScore<'_> {
    fn value(&self, flat: &[f64]) -> Result<f64> {
        let p = HeadParams::from_flat(self.dims, flat)?;
        match self.flavor {
            Flavor::IsOnly => score_is(self.r, self.m, self.t, &p),
            Flavor::EmOnly => score_em(self.m, self.t, &p),
            f => score(self.r, self.m, self.t, &p, f),
        }
    }

    fn value_and_gradient(&self, flat: &[f64]) -> Result<(f64, Vec<f64>)> {
        let p = HeadParams::from_flat(self.dims, flat)?;
        let mut tape = Tape::new();
        let vars = HeadVars::register(&mut tape, &p)?;
        let q = vars.encode_query(&mut tape, self.r, self.m, self.flavor)?;
        let t = tape.leaf(self.t.to_vec());
        let s = vars.pair_score(&mut tape, &q, t, self.flavor)?;
        let grads = tape.backward(s);
        Ok((tape.scalar_value(s), vars.flat_gradient(&grads)))
    }
}

/// The batch loss of one flavor; values come from the precomputed-query
/// scoring path instead of the tape.
struct BatchLoss<'a> {
    dims: HeadDims,
    flavor: Flavor,
    batch: Vec<Triplet<'a>>,
}

impl ScalarFunction for BatchLoss<'_> {
    fn value(&self, flat: &[f64]) -> Result<f64> {
        let p = HeadParams::from_flat(self.dims, flat)?;
        let targets =
            PreparedGallery::new(self.dims.image, self.batch.iter().map(|x| x.t), self.flavor)?;
        let scores = self
            .batch
            .iter()
            .map(|q| PreparedQuery::new(q.r, q.m, &p, self.flavor)?.score_all(&targets))
            .collect::<Result<Vec<Vec<f64>>>>()?;
        bbc_loss_from_scores(&scores, p.gamma)
    }

    fn value_and_gradient(&self, flat: &[f64]) -> Result<(f64, Vec<f64>)> {
        bbc_loss(
            &self.batch,
            &HeadParams::from_flat(self.dims, flat)?,
            self.flavor,
        )
    }
}

/// Runs the suite; a failing coordinate marks its entry and the report as
/// failed but does not stop the run.
pub fn gradient_suite(config: &GradSuiteConfig) -> Result<GradSuiteReport> {
    let start = Instant::now();
    let dims = HeadDims::square(config.dims);
    let mut entries = Vec::new();
    for instance in 0..config.instances {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(instance as u64);
        let params = instance_params(dims, &mut rng)?;
        let rows = (0..config.batch.max(2))
            .map(|_| {
                Ok((
                    unit(&mut rng, dims.image)?,
                    unit(&mut rng, dims.text)?,
                    unit(&mut rng, dims.image)?,
                ))
            })
            .collect::<Result<Vec<_>>>()?;
        let check = GradCheckConfig {
            h: config.h,
            tol: config.tol,
            coordinates: config
                .per_block
                .map(|k| sample_coordinates(dims, k, &mut rng)),
            ..GradCheckConfig::default()
        };
        let flat = params.to_flat();

        let (r, m, t) = &rows[0];
        let mut functions: Vec<(String, Box<dyn ScalarFunction + '_>)> = vec![
            (
                "score_is".into(),
                Box::new(PairScore {
                    dims,
                    flavor: Flavor::IsOnly,
                    r,
                    m,
                    t,
                }),
            ),
            (
                "score_em".into(),
                Box::new(PairScore {
                    dims,
                    flavor: Flavor::EmOnly,
                    r,
                    m,
                    t,
                }),
            ),
        ];
        for flavor in Flavor::ALL {
            let batch = rows.iter().map(|(r, m, t)| Triplet { r, m, t }).collect();
            functions.push((
                format!("loss/{flavor}"),
                Box::new(BatchLoss {
                    dims,
                    flavor,
                    batch,
                }),
            ));
        }
        for (name, f) in functions {
            let report = finite_diff_check(f.as_ref(), &flat, &check)?;
            entries.push(SuiteEntry {
                instance,
                function: name,
                coordinates: report.checks.len(),
                max_rel_error: report.max_rel_error,
                max_abs_error: report.max_abs_error,
                failures: report.failures().count(),
                passed: report.passed,
            });
        }
    }
    let passed = entries.iter().all(|e| e.passed);
    Ok(GradSuiteReport {
        dims: config.dims,
        instances: config.instances,
        entries,
        passed,
        seconds: start.elapsed().as_secs_f64(),
    })
}
