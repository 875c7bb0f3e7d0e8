//! Synthetic attribute-flip dataset.
//!
//! Items are latent vectors of `n_attributes` binary (±1) attributes. An
//! image embedding is a fixed random linear map of the latent plus Gaussian
//! noise, L2-normalized. A query flips `flip_count` attributes of its
//! reference; the modifier embedding is a second fixed map applied to the
//! signed attribute delta `target - reference`.
//!
//! The image map is block sparse: every image dimension reads exactly one
//! attribute. Reweighting image dimensions can therefore isolate attributes,
//! which is what the modifier-driven attentions need to exploit. The text map
//! mixes a copy of the image map (weight `text_alignment`) with an unrelated
//! dense map.
//!
//! Each evaluation query gets hard distractors in the gallery:
//! - items sharing every unchanged attribute of the reference but not the
//!   target's values on the flipped ones (image similarity restricted to the
//!   unchanged attributes cannot separate them);
//! - near misses equal to the target except for one unchanged attribute
//!   (matching the requested change alone cannot separate them).
//!
//! The rest of the gallery is uniformly random. Gallery latents are unique.

use std::collections::{BTreeMap, HashSet};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{
    write_feature_bank, write_gallery, Dataset, FeatureBank, Split, TripletRecord, TripletSet,
};
use crate::error::{Error, Result};
use crate::numerics::{norm, NORM_EPS};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    pub n_attributes: usize,
    pub dim_image: usize,
    pub dim_text: usize,
    pub n_train: usize,
    /// Queries in the `val` split.
    pub n_eval: usize,
    /// Queries in the `test` split.
    pub n_test: usize,
    pub gallery: usize,
    pub noise_sigma: f64,
    pub flip_count: usize,
    /// Same-unchanged-attribute distractors per evaluation query.
    pub class_confusers: usize,
    /// One-attribute-off copies of the target per evaluation query.
    pub near_misses: usize,
    /// Share of the image map inside the text map, in `[0, 1]`.
    pub text_alignment: f64,
    /// Candidate subset size per evaluation query; 0 writes no subsets.
    pub subset_size: usize,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            n_attributes: 12,
            dim_image: 64,
            dim_text: 64,
            n_train: 2000,
            n_eval: 100,
            n_test: 0,
            gallery: 1000,
            noise_sigma: 0.05,
            flip_count: 4,
            class_confusers: 2,
            near_misses: 2,
            text_alignment: 0.4,
            subset_size: 0,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::SpecInvalid(msg));
        if self.n_attributes == 0 || self.n_attributes > 63 {
            return bad(format!(
                "n_attributes must be in 1..=63, got {}",
                self.n_attributes
            ));
        }
        if self.flip_count >= self.n_attributes {
            return bad(format!(
                "flip_count {} must be below n_attributes {}",
                self.flip_count, self.n_attributes
            ));
        }
        if !(self.noise_sigma >= 0.0) || !self.noise_sigma.is_finite() {
            return bad(format!(
                "noise_sigma must be finite and non-negative, got {}",
                self.noise_sigma
            ));
        }
        if self.dim_image < self.n_attributes {
            return bad(format!(
                "dim_image {} must be at least n_attributes {}",
                self.dim_image, self.n_attributes
            ));
        }
        if self.dim_text == 0 {
            return bad("dim_text must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.text_alignment) {
            return bad(format!(
                "text_alignment must lie in [0, 1], got {}",
                self.text_alignment
            ));
        }
        let queries = self.n_eval + self.n_test;
        if self.gallery < queries {
            return bad(format!(
                "gallery {} cannot hold {queries} targets",
                self.gallery
            ));
        }
        if (self.gallery as u128) > (1u128 << self.n_attributes) {
            return bad(format!(
                "gallery {} exceeds the {} distinct latents",
                self.gallery,
                1u128 << self.n_attributes
            ));
        }
        if self.subset_size > self.gallery {
            return bad(format!(
                "subset_size {} exceeds gallery {}",
                self.subset_size, self.gallery
            ));
        }
        Ok(())
    }
}

/// Ground-truth latents of every generated item.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LatentTable {
    /// Image id -> ±1 attributes.
    pub images: BTreeMap<String, Vec<i8>>,
    /// Modifier id -> signed delta in {-2, 0, 2}.
    pub deltas: BTreeMap<String, Vec<i8>>,
}

#[derive(Debug, Clone)]
pub struct SynthData {
    pub images: FeatureBank,
    pub modifiers: FeatureBank,
    pub triplets: TripletSet,
    pub gallery: Vec<String>,
    pub latents: LatentTable,
}

impl SynthData {
    pub fn dataset(&self) -> Result<Dataset> {
        Dataset::from_banks(
            &self.images,
            &self.modifiers,
            self.triplets.clone(),
            Some(self.gallery.clone()),
        )
    }

    /// Writes the standard dataset layout plus `latents.json`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        write_feature_bank(&self.images, &dir.join("images.afb"))?;
        write_feature_bank(&self.modifiers, &dir.join("modifiers.afb"))?;
        self.triplets.write(&dir.join("triplets.jsonl"))?;
        if !self.triplets.subsets.is_empty() {
            self.triplets.write_subsets(&dir.join("subsets.jsonl"))?;
        }
        write_gallery(&self.gallery, &dir.join("gallery.txt"))?;
        std::fs::write(dir.join("latents.json"), serde_json::to_vec(&self.latents)?)?;
        Ok(())
    }
}

struct Maps {
    attrs: usize,
    /// Weight of image dimension `d` on attribute `d % attrs`.
    image: Vec<f64>,
    /// Dense `dim_text x attrs`, row-major.
    text: Vec<f64>,
    noise: Normal<f64>,
}

impl Maps {
    fn new(spec: &SynthSpec, rng: &mut ChaCha8Rng) -> Self {
        let a = spec.n_attributes;
        let image_dist =
            Normal::new(0.0, 1.0 / (spec.dim_image as f64).sqrt()).expect("valid normal");
        let image: Vec<f64> = (0..spec.dim_image)
            .map(|_| image_dist.sample(rng))
            .collect();

        // Column norms of the unrelated part match the block map's (~1/a).
        let dense_dist =
            Normal::new(0.0, 1.0 / ((spec.dim_text * a) as f64).sqrt()).expect("valid normal");
        let aligned = spec.dim_text == spec.dim_image;
        let beta = if aligned { spec.text_alignment } else { 0.0 };
        let rest = (1.0 - beta * beta).sqrt();
        let mut text = vec![0.0; spec.dim_text * a];
        for d in 0..spec.dim_text {
            for k in 0..a {
                let block = if aligned && d % a == k { image[d] } else { 0.0 };
                text[d * a + k] = beta * block + rest * dense_dist.sample(rng);
            }
        }
        let noise =
            Normal::new(0.0, spec.noise_sigma.max(f64::MIN_POSITIVE)).expect("valid normal");
        Self {
            attrs: a,
            image,
            text,
            noise,
        }
    }

    fn embed_image(&self, latent: u64, sigma: f64, rng: &mut ChaCha8Rng) -> Vec<f32> {
        let mut v: Vec<f64> = self
            .image
            .iter()
            .enumerate()
            .map(|(d, w)| w * sign(latent, d % self.attrs))
            .collect();
        if sigma > 0.0 {
            for x in &mut v {
                *x += self.noise.sample(rng);
            }
        }
        to_unit_f32(v)
    }

    fn embed_delta(&self, delta: &[i8]) -> Vec<f32> {
        let a = self.attrs;
        let v: Vec<f64> = self
            .text
            .chunks_exact(a)
            .map(|row| {
                let mut acc = 0.0;
                for (w, d) in row.iter().zip(delta) {
                    acc += w * f64::from(*d);
                }
                acc
            })
            .collect();
        to_unit_f32(v)
    }
}

fn to_unit_f32(v: Vec<f64>) -> Vec<f32> {
    let n = norm(&v);
    let scale = if n > NORM_EPS { 1.0 / n } else { 1.0 };
    v.into_iter().map(|x| (x * scale) as f32).collect()
}

fn sign(latent: u64, attr: usize) -> f64 {
    if latent >> attr & 1 == 1 {
        1.0
    } else {
        -1.0
    }
}

fn latent_vec(latent: u64, attrs: usize) -> Vec<i8> {
    (0..attrs).map(|a| sign(latent, a) as i8).collect()
}

fn delta_vec(reference: u64, target: u64, attrs: usize) -> Vec<i8> {
    (0..attrs)
        .map(|a| (sign(target, a) - sign(reference, a)) as i8)
        .collect()
}

struct Query {
    reference: u64,
    target: u64,
    flipped: u64,
}

fn random_latent(rng: &mut ChaCha8Rng, attrs: usize) -> u64 {
    rng.gen::<u64>() & ((1u64 << attrs) - 1)
}

fn random_flip_mask(rng: &mut ChaCha8Rng, attrs: usize, count: usize) -> u64 {
    let picked = rand::seq::index::sample(rng, attrs, count);
    picked.iter().fold(0u64, |m, a| m | 1 << a)
}

/// Spreads the low bits of `bits` over the set positions of `mask`.
fn deposit(bits: u64, mask: u64) -> u64 {
    let mut out = 0;
    let mut k = 0;
    for pos in 0..64 {
        if mask >> pos & 1 == 1 {
            if bits >> k & 1 == 1 {
                out |= 1 << pos;
            }
            k += 1;
        }
    }
    out
}

pub fn generate_synthetic(spec: &SynthSpec) -> Result<SynthData> {
    spec.validate()?;
    let a = spec.n_attributes;
    let mut map_rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let maps = Maps::new(spec, &mut map_rng);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(1);

    let mut image_ids = Vec::new();
    let mut image_data: Vec<f32> = Vec::new();
    let mut mod_ids = Vec::new();
    let mut mod_data: Vec<f32> = Vec::new();
    let mut latents = LatentTable::default();
    let mut records = Vec::new();

    let mut push_image =
        |id: String, latent: u64, rng: &mut ChaCha8Rng, latents: &mut LatentTable| {
            image_data.extend(maps.embed_image(latent, spec.noise_sigma, rng));
            latents.images.insert(id.clone(), latent_vec(latent, a));
            image_ids.push(id);
        };
    let mut push_modifier = |id: String, reference: u64, target: u64, latents: &mut LatentTable| {
        let delta = delta_vec(reference, target, a);
        mod_data.extend(maps.embed_delta(&delta));
        latents.deltas.insert(id.clone(), delta);
        mod_ids.push(id);
    };

    for i in 0..spec.n_train {
        let reference = random_latent(&mut rng, a);
        let target = reference ^ random_flip_mask(&mut rng, a, spec.flip_count);
        let (r, m, t) = (
            format!("train_ref_{i:05}"),
            format!("train_mod_{i:05}"),
            format!("train_tgt_{i:05}"),
        );
        push_image(r.clone(), reference, &mut rng, &mut latents);
        push_image(t.clone(), target, &mut rng, &mut latents);
        push_modifier(m.clone(), reference, target, &mut latents);
        records.push(TripletRecord {
            ref_id: r,
            mod_id: m,
            tgt_id: t,
            split: Split::Train,
            category: None,
        });
    }

    // Evaluation queries with unique target latents.
    let mut used: HashSet<u64> = HashSet::new();
    let mut queries = Vec::with_capacity(spec.n_eval + spec.n_test);
    for _ in 0..spec.n_eval + spec.n_test {
        let mut attempts = 0;
        let query = loop {
            let reference = random_latent(&mut rng, a);
            let flipped = random_flip_mask(&mut rng, a, spec.flip_count);
            let target = reference ^ flipped;
            if used.insert(target) {
                break Query {
                    reference,
                    target,
                    flipped,
                };
            }
            attempts += 1;
            if attempts > 10_000 {
                return Err(Error::SpecInvalid(
                    "cannot draw unique evaluation targets".into(),
                ));
            }
        };
        queries.push(query);
    }

    // Gallery: targets, then per-query distractors, then random fill.
    // `owner` remembers which query a distractor was built for.
    let mut gallery: Vec<(u64, Option<usize>)> = queries
        .iter()
        .enumerate()
        .map(|(q, x)| (x.target, Some(q)))
        .collect();
    let full_mask = (1u64 << a) - 1;
    'outer: for (q, query) in queries.iter().enumerate() {
        let class_size = 1u64 << spec.flip_count;
        let mut combos: Vec<u64> = if spec.flip_count <= 16 {
            (0..class_size).collect()
        } else {
            (0..spec.class_confusers * 4)
                .map(|_| rng.gen::<u64>() & (class_size - 1))
                .collect()
        };
        combos.shuffle(&mut rng);
        let unchanged = full_mask & !query.flipped;
        let mut added = 0;
        for bits in combos {
            if added == spec.class_confusers {
                break;
            }
            let latent = (query.reference & unchanged) | deposit(bits, query.flipped);
            if latent != query.target && used.insert(latent) {
                if gallery.len() == spec.gallery {
                    break 'outer;
                }
                gallery.push((latent, Some(q)));
                added += 1;
            }
        }
        let unchanged_attrs: Vec<usize> = (0..a).filter(|&k| unchanged >> k & 1 == 1).collect();
        let picks = rand::seq::index::sample(
            &mut rng,
            unchanged_attrs.len(),
            spec.near_misses.min(unchanged_attrs.len()),
        );
        for k in picks.iter() {
            let latent = query.target ^ (1 << unchanged_attrs[k]);
            if used.insert(latent) {
                if gallery.len() == spec.gallery {
                    break 'outer;
                }
                gallery.push((latent, Some(q)));
            }
        }
    }
    while gallery.len() < spec.gallery {
        let latent = random_latent(&mut rng, a);
        if used.insert(latent) {
            gallery.push((latent, None));
        }
    }
    let targets: Vec<usize> = (0..queries.len()).collect();
    gallery.shuffle(&mut rng);

    let mut gallery_ids = Vec::with_capacity(gallery.len());
    let mut target_ids = vec![String::new(); queries.len()];
    let mut by_query: Vec<Vec<String>> = vec![Vec::new(); queries.len()];
    for (g, (latent, owner)) in gallery.iter().enumerate() {
        let id = format!("g{g:05}");
        push_image(id.clone(), *latent, &mut rng, &mut latents);
        if let Some(q) = owner {
            if *latent == queries[*q].target {
                target_ids[*q] = id.clone();
            } else {
                by_query[*q].push(id.clone());
            }
        }
        gallery_ids.push(id);
    }
    debug_assert!(targets.iter().all(|&q| !target_ids[q].is_empty()));

    let mut subsets = BTreeMap::new();
    for (q, query) in queries.iter().enumerate() {
        let split = if q < spec.n_eval {
            Split::Val
        } else {
            Split::Test
        };
        let local = if q < spec.n_eval { q } else { q - spec.n_eval };
        let (r, m) = (
            format!("{split}_ref_{local:04}"),
            format!("{split}_mod_{local:04}"),
        );
        push_image(r.clone(), query.reference, &mut rng, &mut latents);
        push_modifier(m.clone(), query.reference, query.target, &mut latents);
        if spec.subset_size > 0 {
            let mut members = vec![target_ids[q].clone()];
            let mut pool = by_query[q].clone();
            pool.shuffle(&mut rng);
            members.extend(pool.into_iter().take(spec.subset_size - 1));
            while members.len() < spec.subset_size {
                let id = &gallery_ids[rng.gen_range(0..gallery_ids.len())];
                if !members.contains(id) {
                    members.push(id.clone());
                }
            }
            members.shuffle(&mut rng);
            subsets.insert(records.len(), members);
        }
        records.push(TripletRecord {
            ref_id: r,
            mod_id: m,
            tgt_id: target_ids[q].clone(),
            split,
            category: None,
        });
    }

    let images = FeatureBank::new(spec.dim_image, image_ids, image_data)?;
    let modifiers = FeatureBank::new(spec.dim_text, mod_ids, mod_data)?;
    Ok(SynthData {
        images,
        modifiers,
        triplets: TripletSet { records, subsets },
        gallery: gallery_ids,
        latents,
    })
}
