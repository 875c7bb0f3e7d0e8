//! Independent scalar reference implementation of the head.
//!
//! Plain index loops over the public parameter fields, left-to-right
//! summation, no shared helpers with the library.

#![allow(dead_code, clippy::needless_range_loop)]

use artemis::head::AttentionParams;
use artemis::numerics::Mat64;
use artemis::{Flavor, HeadParams};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn matvec_bias(w: &Mat64, x: &[f64], b: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; w.rows()];
    for i in 0..w.rows() {
        let mut acc = b[i];
        for j in 0..w.cols() {
            acc += w.get(i, j) * x[j];
        }
        out[i] = acc;
    }
    out
}

pub fn attention(p: &AttentionParams, m: &[f64]) -> Vec<f64> {
    let mut hidden = matvec_bias(&p.w1, m, &p.b1);
    for h in hidden.iter_mut() {
        if *h < 0.0 {
            *h = 0.0;
        }
    }
    let logits = matvec_bias(&p.w2, &hidden, &p.b2);
    let mut max = f64::NEG_INFINITY;
    for &l in &logits {
        if l > max {
            max = l;
        }
    }
    let mut total = 0.0;
    let mut out = vec![0.0; logits.len()];
    for i in 0..logits.len() {
        out[i] = (logits[i] - max).exp();
        total += out[i];
    }
    for v in out.iter_mut() {
        *v /= total;
    }
    out
}

pub fn cosine(x: &[f64], y: &[f64]) -> f64 {
    let (mut xy, mut xx, mut yy) = (0.0, 0.0, 0.0);
    for i in 0..x.len() {
        xy += x[i] * y[i];
        xx += x[i] * x[i];
        yy += y[i] * y[i];
    }
    xy / (xx.sqrt() * yy.sqrt())
}

pub fn score_is(p: &HeadParams, r: &[f64], m: &[f64], t: &[f64]) -> f64 {
    let a = attention(&p.attn_is, m);
    let ar: Vec<f64> = (0..a.len()).map(|i| a[i] * r[i]).collect();
    let at: Vec<f64> = (0..a.len()).map(|i| a[i] * t[i]).collect();
    cosine(&ar, &at)
}

pub fn score_em(p: &HeadParams, m: &[f64], t: &[f64]) -> f64 {
    let a = attention(&p.attn_em, m);
    let projected = matvec_bias(&p.proj.w, m, &p.proj.b);
    let at: Vec<f64> = (0..a.len()).map(|i| a[i] * t[i]).collect();
    cosine(&projected, &at)
}

pub fn score(p: &HeadParams, r: &[f64], m: &[f64], t: &[f64], flavor: Flavor) -> f64 {
    match flavor {
        Flavor::ImageOnly => cosine(r, t),
        Flavor::TextOnly => cosine(m, t),
        Flavor::LateFusion => {
            let fused: Vec<f64> = (0..r.len()).map(|i| r[i] + m[i]).collect();
            cosine(&fused, t)
        }
        Flavor::IsOnly => score_is(p, r, m, t),
        Flavor::EmOnly => score_em(p, m, t),
        Flavor::Artemis => score_em(p, m, t) + score_is(p, r, m, t),
    }
}

/// Mean over rows of `-log softmax(gamma * row)[i]`.
pub fn bbc_loss(scores: &[Vec<f64>], gamma: f64) -> f64 {
    let mut total = 0.0;
    for (i, row) in scores.iter().enumerate() {
        let mut max = f64::NEG_INFINITY;
        for &s in row {
            if gamma * s > max {
                max = gamma * s;
            }
        }
        let mut z = 0.0;
        for &s in row {
            z += (gamma * s - max).exp();
        }
        total += -(gamma * row[i] - max - z.ln());
    }
    total / scores.len() as f64
}

/// 1-based rank of the best ground-truth candidate: candidates strictly
/// above it, plus tied candidates with a smaller id, plus one.
pub fn brute_force_rank(row: &[f64], ids: &[String], truth: &[usize]) -> usize {
    let mut best = usize::MAX;
    for &g in truth {
        let mut ahead = 0;
        for c in 0..row.len() {
            if row[c] > row[g] || (row[c] == row[g] && ids[c] < ids[g]) {
                ahead += 1;
            }
        }
        best = best.min(ahead + 1);
    }
    best
}

/// Seeded head with random weights, biases and temperature, so that no
/// parameter sits at a special value.
pub fn random_head(dims: artemis::HeadDims, seed: u64) -> HeadParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = HeadParams::init(dims, rng.gen()).unwrap();
    let mut flat = params.to_flat();
    for v in flat.iter_mut() {
        *v += rng.gen_range(-0.05..0.05);
    }
    *flat.last_mut().unwrap() = rng.gen_range(1.0..10.0);
    params.set_flat(&flat).unwrap();
    params
}
