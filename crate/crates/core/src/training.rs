//! In-batch classification loss, AdamW and the training loop.
//!
//! For a batch of `B` triplets the loss treats every target in the batch as
//! a class: row `i` holds `γ·s(r_i, m_i, t_j)` for all `j` and the correct
//! class is `i`. The loss is the mean cross-entropy over rows.

use std::collections::BTreeMap;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datasets::{Dataset, Split};
use crate::error::{Error, Result};
use crate::evaluation::{evaluate, round_half_up_2, EvalOptions};
use crate::head::{Flavor, HeadDims, HeadParams, HeadVars, MIN_GAMMA};
use crate::numerics::Tape;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub lr0: f64,
    pub lr_decay: f64,
    pub decay_every: usize,
    pub weight_decay: f64,
    pub betas: (f64, f64),
    pub eps: f64,
    pub seed: u64,
    pub flavor: Flavor,
    /// Hidden width of the attention MLPs; defaults to the image width.
    pub hidden: Option<usize>,
    /// Train on the final short batch instead of dropping it.
    pub keep_last_batch: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            epochs: 50,
            lr0: 5e-4,
            lr_decay: 0.5,
            decay_every: 10,
            weight_decay: 0.01,
            betas: (0.9, 0.999),
            eps: 1e-8,
            seed: 0,
            flavor: Flavor::Artemis,
            hidden: None,
            keep_last_batch: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.batch_size < 2 {
            return bad(format!(
                "batch_size must be at least 2, got {}",
                self.batch_size
            ));
        }
        if !(self.lr0 > 0.0) || !self.lr0.is_finite() {
            return bad(format!("lr0 must be positive, got {}", self.lr0));
        }
        if self.decay_every == 0 {
            return bad("decay_every must be at least 1".into());
        }
        if !(self.lr_decay > 0.0) || !(self.weight_decay >= 0.0) || !(self.eps > 0.0) {
            return bad("lr_decay and eps must be positive, weight_decay non-negative".into());
        }
        let (b1, b2) = self.betas;
        if !(0.0..1.0).contains(&b1) || !(0.0..1.0).contains(&b2) {
            return bad(format!("betas must lie in [0, 1), got ({b1}, {b2})"));
        }
        if self.hidden == Some(0) {
            return bad("hidden width must be positive".into());
        }
        Ok(())
    }
}

/// Learning rate used throughout epoch `epoch` (0-based).
pub fn lr_at_epoch(epoch: usize, config: &TrainConfig) -> f64 {
    config.lr0 * config.lr_decay.powi((epoch / config.decay_every) as i32)
}

/// One training example as borrowed embedding rows.
#[derive(Debug, Clone, Copy)]
pub struct Triplet<'a> {
    pub r: &'a [f64],
    pub m: &'a [f64],
    pub t: &'a [f64],
}

/// Loss and gradient (flattened like [`HeadParams::to_flat`]) of one batch.
pub fn bbc_loss(
    batch: &[Triplet<'_>],
    params: &HeadParams,
    flavor: Flavor,
) -> Result<(f64, Vec<f64>)> {
    if batch.len() < 2 {
        return Err(Error::shape(format!(
            "the loss needs at least 2 triplets per batch, got {}",
            batch.len()
        )));
    }
    let mut tape = Tape::new();
    let vars = HeadVars::register(&mut tape, params)?;
    let queries = batch
        .iter()
        .map(|x| vars.encode_query(&mut tape, x.r, x.m, flavor))
        .collect::<Result<Vec<_>>>()?;
    let targets: Vec<_> = batch.iter().map(|x| tape.leaf(x.t.to_vec())).collect();
    let mut rows = Vec::with_capacity(batch.len());
    for (i, q) in queries.iter().enumerate() {
        let scores = targets
            .iter()
            .map(|&t| vars.pair_score(&mut tape, q, t, flavor))
            .collect::<Result<Vec<_>>>()?;
        let stacked = tape.stack(&scores);
        let logits = tape.scale(vars.gamma, stacked);
        rows.push(tape.cross_entropy(logits, i)?);
    }
    let loss = tape.mean(&rows)?;
    let grads = tape.backward(loss);
    Ok((tape.scalar_value(loss), vars.flat_gradient(&grads)))
}

/// Loss of a precomputed `B × B` score matrix (rows = queries).
pub fn bbc_loss_from_scores(scores: &[Vec<f64>], gamma: f64) -> Result<f64> {
    let b = scores.len();
    if b < 2 {
        return Err(Error::shape(format!(
            "the loss needs at least 2 rows, got {b}"
        )));
    }
    let mut total = 0.0;
    for (i, row) in scores.iter().enumerate() {
        if row.len() != b {
            return Err(Error::shape(format!(
                "score row {i} has {} entries, expected {b}",
                row.len()
            )));
        }
        let z: Vec<f64> = row.iter().map(|s| gamma * s).collect();
        let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        total += lse - z[i];
    }
    Ok(total / b as f64)
}

/// AdamW moments for a flat parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    m: Vec<f64>,
    v: Vec<f64>,
    step: u64,
}

impl AdamW {
    pub fn new(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            step: 0,
        }
    }

    /// Completed steps.
    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One decoupled-decay update with bias correction. Coordinates whose
    /// `decay` flag is false skip weight decay.
    pub fn update(
        &mut self,
        params: &mut [f64],
        grads: &[f64],
        decay: &[bool],
        lr: f64,
        config: &TrainConfig,
    ) -> Result<()> {
        if params.len() != self.m.len()
            || grads.len() != params.len()
            || decay.len() != params.len()
        {
            return Err(Error::shape(format!(
                "optimizer over {} values got {} params, {} grads, {} decay flags",
                self.m.len(),
                params.len(),
                grads.len(),
                decay.len()
            )));
        }
        if let Some(index) = grads.iter().position(|g| !g.is_finite()) {
            return Err(Error::NonFiniteGradient { index });
        }
        self.step += 1;
        let (b1, b2) = config.betas;
        let c1 = 1.0 - b1.powi(self.step as i32);
        let c2 = 1.0 - b2.powi(self.step as i32);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = b1 * self.m[i] + (1.0 - b1) * g;
            self.v[i] = b2 * self.v[i] + (1.0 - b2) * g * g;
            if decay[i] {
                params[i] -= lr * config.weight_decay * params[i];
            }
            let m_hat = self.m[i] / c1;
            let v_hat = self.v[i] / c2;
            params[i] -= lr * m_hat / (v_hat.sqrt() + config.eps);
        }
        Ok(())
    }

    /// Updates a head: `γ` (the last flat value) is not decayed and is
    /// clamped to at least [`MIN_GAMMA`].
    pub fn step_head(
        &mut self,
        params: &mut HeadParams,
        grads: &[f64],
        lr: f64,
        config: &TrainConfig,
    ) -> Result<()> {
        let mut flat = params.to_flat();
        let mut decay = vec![true; flat.len()];
        *decay.last_mut().expect("gamma") = false;
        self.update(&mut flat, grads, &decay, lr, config)?;
        let gamma = flat.last_mut().expect("gamma");
        *gamma = gamma.max(MIN_GAMMA);
        params.set_flat(&flat)
    }
}

/// Summary of one epoch. `metrics` maps split name to rounded metric cells
/// (plus `aggregate`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: f64,
    pub lr: f64,
    pub metrics: BTreeMap<String, BTreeMap<String, f64>>,
    pub seconds: f64,
}

/// Parameters at the epoch where one split's selection metric peaked.
#[derive(Debug, Clone, PartialEq)]
pub struct BestCheckpoint {
    pub split: Split,
    pub epoch: usize,
    pub metric: f64,
    pub params: HeadParams,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: HeadParams,
    pub logs: Vec<EpochLog>,
    pub best: Vec<BestCheckpoint>,
}

impl TrainOutcome {
    /// Selection metric of `split` for every epoch.
    pub fn series(&self, split: Split) -> Vec<f64> {
        self.logs
            .iter()
            .filter_map(|l| {
                l.metrics
                    .get(split.name())
                    .and_then(|m| m.get("aggregate"))
                    .copied()
            })
            .collect()
    }
}

/// Splits monitored after each epoch: whichever of val and test exist.
pub fn monitored_splits(dataset: &Dataset) -> Vec<Split> {
    [Split::Val, Split::Test]
        .into_iter()
        .filter(|s| dataset.triplets.has_split(*s))
        .collect()
}

/// Head dimensions implied by a dataset and config.
pub fn head_dims(dataset: &Dataset, config: &TrainConfig) -> HeadDims {
    let image = dataset.images.dim();
    HeadDims::new(
        dataset.modifiers.dim(),
        image,
        config.hidden.unwrap_or(image),
    )
}

pub fn train(dataset: &Dataset, config: &TrainConfig, eval: &EvalOptions) -> Result<TrainOutcome> {
    train_with(dataset, config, eval, |_| {})
}

/// Trains from a seeded initialization, calling `on_epoch` after every
/// epoch. Results depend only on the inputs, never on `eval.threads`.
pub fn train_with(
    dataset: &Dataset,
    config: &TrainConfig,
    eval: &EvalOptions,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainOutcome> {
    config.validate()?;
    let train_idx = dataset.triplets.indices(Split::Train);
    if train_idx.is_empty() {
        return Err(Error::EmptySplit("train".into()));
    }
    let rows = train_idx
        .iter()
        .map(|&i| {
            let rec = &dataset.triplets.records[i];
            Ok(Triplet {
                r: dataset.images.require(&rec.ref_id)?,
                m: dataset.modifiers.require(&rec.mod_id)?,
                t: dataset.images.require(&rec.tgt_id)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let mut params = HeadParams::init(head_dims(dataset, config), config.seed)?;
    let mut optimizer = AdamW::new(params.len());
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(2);
    let splits = monitored_splits(dataset);
    let mut logs = Vec::with_capacity(config.epochs);
    let mut best: Vec<BestCheckpoint> = Vec::new();

    let mut order: Vec<usize> = (0..rows.len()).collect();
    for epoch in 0..config.epochs {
        let start = Instant::now();
        let lr = lr_at_epoch(epoch, config);
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(config.batch_size) {
            if chunk.len() < config.batch_size && !(config.keep_last_batch && chunk.len() >= 2) {
                continue;
            }
            let batch: Vec<Triplet<'_>> = chunk.iter().map(|&i| rows[i]).collect();
            let (loss, grads) = bbc_loss(&batch, &params, config.flavor)?;
            if !loss.is_finite() {
                return Err(Error::NonFinite(format!("loss at epoch {epoch} is {loss}")));
            }
            optimizer.step_head(&mut params, &grads, lr, config)?;
            loss_sum += loss;
            batches += 1;
        }
        if batches == 0 {
            return Err(Error::Config(format!(
                "train split of {} triplets yields no full batch of {}",
                rows.len(),
                config.batch_size
            )));
        }

        let mut metrics = BTreeMap::new();
        for &split in &splits {
            let report = evaluate(dataset, split, &params, config.flavor, eval)?.report;
            let score = report.selection_metric();
            let mut cells: BTreeMap<String, f64> = report
                .metrics
                .iter()
                .map(|(k, v)| (k.clone(), round_half_up_2(*v)))
                .collect();
            cells.insert("aggregate".into(), round_half_up_2(score));
            metrics.insert(split.name().to_string(), cells);
            match best.iter_mut().find(|b| b.split == split) {
                Some(b) if score <= b.metric => {}
                Some(b) => {
                    *b = BestCheckpoint {
                        split,
                        epoch,
                        metric: score,
                        params: params.clone(),
                    }
                }
                None => best.push(BestCheckpoint {
                    split,
                    epoch,
                    metric: score,
                    params: params.clone(),
                }),
            }
        }
        let log = EpochLog {
            epoch,
            loss: loss_sum / batches as f64,
            lr,
            metrics,
            seconds: start.elapsed().as_secs_f64(),
        };
        on_epoch(&log);
        logs.push(log);
    }
    Ok(TrainOutcome { params, logs, best })
}

fn argmax_earliest(series: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in series.iter().enumerate() {
        if *v > series[best] {
            best = i;
        }
    }
    best
}

/// Cross-selection between two monitored splits: returns
/// `(epoch at which to report B, epoch at which to report A)`, i.e. the
/// argmax of A's series and the argmax of B's. Ties go to the earlier epoch.
pub fn select_checkpoint(a: &[f64], b: &[f64]) -> Result<(usize, usize)> {
    if a.len() != b.len() {
        return Err(Error::LengthMismatch {
            left: a.len(),
            right: b.len(),
        });
    }
    if a.is_empty() {
        return Err(Error::EmptyInput("checkpoint selection over no epochs"));
    }
    Ok((argmax_earliest(a), argmax_earliest(b)))
}
