//! Query-by-gallery score matrices.
//!
//! Query-side vectors (attentions, projection, normalized query) are computed
//! once per query and gallery-side squares and norms once per gallery item,
//! so the inner loop is a handful of dot products per pair. For the full
//! head the four reductions run in one pass over the target.

use rayon::prelude::*;

use crate::datasets::Dataset;
use crate::error::{Error, Result};
use crate::head::{AttentionParams, Flavor, HeadParams};
use crate::numerics::{guard_norm, hadamard, l2_normalize, norm, relu, softmax, Mat64};

use super::kernels::{both_sums, dense_sum, gated_sums, quad_sums, Packed};
use super::QuerySpec;

/// `queries × gallery` compatibility scores, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMatrix {
    pub gallery: Vec<String>,
    pub rows: usize,
    pub values: Vec<f64>,
}

impl ScoreMatrix {
    pub fn row(&self, q: usize) -> &[f64] {
        let n = self.gallery.len();
        &self.values[q * n..(q + 1) * n]
    }
}

/// Gallery rows stored contiguously, plus row norms for the plain-cosine
/// flavors. Attention-gated flavors need the squared target entries, which
/// are formed inside the scoring loop instead of being stored.
#[derive(Debug, Clone)]
pub struct PreparedGallery {
    pub dim: usize,
    len: usize,
    rows: Vec<f64>,
    norms: Vec<f64>,
}

impl PreparedGallery {
    pub fn new<'a>(
        dim: usize,
        rows: impl IntoIterator<Item = &'a [f64]>,
        flavor: Flavor,
    ) -> Result<Self> {
        let mut data = Vec::new();
        let mut len = 0;
        for row in rows {
            if row.len() != dim {
                return Err(Error::shape(format!(
                    "gallery row of width {} in a {dim}-wide gallery",
                    row.len()
                )));
            }
            data.extend_from_slice(row);
            len += 1;
        }
        let gated = flavor.uses_is() || flavor.uses_em();
        let norms = if gated {
            Vec::new()
        } else {
            data.chunks_exact(dim.max(1)).map(norm).collect()
        };
        Ok(Self {
            dim,
            len,
            rows: data,
            norms,
        })
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    fn row(&self, k: usize) -> &[f64] {
        &self.rows[k * self.dim..(k + 1) * self.dim]
    }
}

/// Query-side vectors for one flavor.
#[derive(Debug, Clone)]
pub enum PreparedQuery {
    /// Unit query vector compared by plain cosine.
    Dense { q: Packed<1> },
    /// `[weights, att2]`, scoring `weights · t / sqrt(att2 · t²)`: a single
    /// attention-gated cosine.
    Gated { w: Packed<2> },
    /// `[weights, att2]` of the implicit then the explicit cosine; the score
    /// is their sum.
    Both { w: Packed<4> },
}

/// Inputs that share one pass over a packed row group in [`BatchAffine`].
const AFFINE_TILE: usize = 32;

/// Affine map with its weight rows packed four at a time, applied to many
/// inputs so that each row group is reused across a tile of them.
struct BatchAffine {
    cols: usize,
    quads: Vec<Packed<4>>,
    rest: Vec<Packed<1>>,
    bias: Vec<f64>,
}

impl BatchAffine {
    fn new(w: &Mat64, bias: &[f64]) -> Result<Self> {
        if bias.len() != w.rows() {
            return Err(Error::shape(format!(
                "{} weight rows with {} biases",
                w.rows(),
                bias.len()
            )));
        }
        let full = w.rows() - w.rows() % 4;
        Ok(Self {
            cols: w.cols(),
            quads: (0..full)
                .step_by(4)
                .map(|i| Packed::new([w.row(i), w.row(i + 1), w.row(i + 2), w.row(i + 3)]))
                .collect(),
            rest: (full..w.rows()).map(|i| Packed::new([w.row(i)])).collect(),
            bias: bias.to_vec(),
        })
    }

    /// `w · x + bias` for every `x` in `xs`.
    fn apply<X: AsRef<[f64]>>(&self, xs: &[X]) -> Result<Vec<Vec<f64>>> {
        if let Some(x) = xs.iter().find(|x| x.as_ref().len() != self.cols) {
            return Err(Error::shape(format!(
                "affine map of width {} applied to input {}",
                self.cols,
                x.as_ref().len()
            )));
        }
        let full = 4 * self.quads.len();
        let mut out = vec![self.bias.clone(); xs.len()];
        for (tile, tile_out) in xs.chunks(AFFINE_TILE).zip(out.chunks_mut(AFFINE_TILE)) {
            for (g, quad) in self.quads.iter().enumerate() {
                for (x, o) in tile.iter().zip(tile_out.iter_mut()) {
                    let sums = quad_sums(x.as_ref(), quad);
                    for (v, s) in o[4 * g..4 * g + 4].iter_mut().zip(sums) {
                        *v += s;
                    }
                }
            }
            for (i, row) in self.rest.iter().enumerate() {
                for (x, o) in tile.iter().zip(tile_out.iter_mut()) {
                    o[full + i] += dense_sum(x.as_ref(), row);
                }
            }
        }
        Ok(out)
    }
}

/// Attention weights of every modifier in `ms`.
fn attention_batch(p: &AttentionParams, ms: &[&[f64]]) -> Result<Vec<Vec<f64>>> {
    let hidden: Vec<Vec<f64>> = BatchAffine::new(&p.w1, &p.b1)?
        .apply(ms)?
        .iter()
        .map(|h| relu(h))
        .collect();
    Ok(BatchAffine::new(&p.w2, &p.b2)?
        .apply(&hidden)?
        .iter()
        .map(|l| softmax(l))
        .collect())
}

/// `[weights, att2]` of the implicit cosine for attention `a`.
fn gated_is(a: &[f64], r: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    let ar = hadamard(a, r);
    let n = norm(&ar);
    guard_norm(n)?;
    let weights = ar.iter().zip(a).map(|(x, ai)| x * ai / n).collect();
    Ok((weights, hadamard(a, a)))
}

/// `[weights, att2]` of the explicit cosine for attention `a` and projected
/// modifier `p`.
fn gated_em(a: &[f64], p: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    let n = norm(p);
    guard_norm(n)?;
    let weights = p.iter().zip(a).map(|(pi, ai)| pi * ai / n).collect();
    Ok((weights, hadamard(a, a)))
}

/// Query vectors from the head outputs of one query. Each of `a_is`,
/// `a_em` and `p` is present when `flavor` needs it.
fn assemble(
    flavor: Flavor,
    r: &[f64],
    a_is: Option<&[f64]>,
    a_em: Option<&[f64]>,
    p: Option<&[f64]>,
) -> Result<PreparedQuery> {
    let missing = || Error::shape(format!("{flavor} query assembled without its head outputs"));
    Ok(match flavor {
        Flavor::IsOnly => {
            let (weights, att2) = gated_is(a_is.ok_or_else(missing)?, r)?;
            PreparedQuery::Gated {
                w: Packed::new([&weights, &att2]),
            }
        }
        Flavor::EmOnly => {
            let (weights, att2) = gated_em(a_em.ok_or_else(missing)?, p.ok_or_else(missing)?)?;
            PreparedQuery::Gated {
                w: Packed::new([&weights, &att2]),
            }
        }
        Flavor::Artemis => {
            let (is, is2) = gated_is(a_is.ok_or_else(missing)?, r)?;
            let (em, em2) = gated_em(a_em.ok_or_else(missing)?, p.ok_or_else(missing)?)?;
            PreparedQuery::Both {
                w: Packed::new([&is, &is2, &em, &em2]),
            }
        }
        _ => return Err(missing()),
    })
}

fn check_head_widths(params: &HeadParams, r: &[f64], m: &[f64]) -> Result<()> {
    let d = params.dims;
    if r.len() != d.image || m.len() != d.text {
        return Err(Error::shape(format!(
            "query widths ({}, {}) do not match head ({}, {})",
            r.len(),
            m.len(),
            d.image,
            d.text
        )));
    }
    Ok(())
}

impl PreparedQuery {
    pub fn new(r: &[f64], m: &[f64], params: &HeadParams, flavor: Flavor) -> Result<Self> {
        let same = |a: &[f64], b: &[f64]| {
            if a.len() == b.len() {
                Ok(())
            } else {
                Err(Error::shape(format!(
                    "{flavor} needs equal widths, got {} and {}",
                    a.len(),
                    b.len()
                )))
            }
        };
        Ok(match flavor {
            Flavor::ImageOnly => PreparedQuery::Dense {
                q: Packed::new([&l2_normalize(r)?]),
            },
            Flavor::TextOnly => PreparedQuery::Dense {
                q: Packed::new([&l2_normalize(m)?]),
            },
            Flavor::LateFusion => {
                same(r, m)?;
                let fused: Vec<f64> = r.iter().zip(m).map(|(a, b)| a + b).collect();
                PreparedQuery::Dense {
                    q: Packed::new([&l2_normalize(&fused)?]),
                }
            }
            _ => {
                check_head_widths(params, r, m)?;
                let a_is = if flavor.uses_is() {
                    Some(params.attn_is.forward(m)?)
                } else {
                    None
                };
                let (a_em, p) = if flavor.uses_em() {
                    (
                        Some(params.attn_em.forward(m)?),
                        Some(params.proj.forward(m)?),
                    )
                } else {
                    (None, None)
                };
                assemble(flavor, r, a_is.as_deref(), a_em.as_deref(), p.as_deref())?
            }
        })
    }

    /// [`PreparedQuery::new`] for every `(reference, modifier)` pair. Head
    /// outputs use the fused row kernels and each weight matrix is read once
    /// per tile of queries, so values agree with separate calls up to
    /// rounding.
    pub fn batch(
        pairs: &[(&[f64], &[f64])],
        params: &HeadParams,
        flavor: Flavor,
    ) -> Result<Vec<Self>> {
        if !(flavor.uses_is() || flavor.uses_em()) {
            return pairs
                .iter()
                .map(|(r, m)| Self::new(r, m, params, flavor))
                .collect();
        }
        for (r, m) in pairs {
            check_head_widths(params, r, m)?;
        }
        let ms: Vec<&[f64]> = pairs.iter().map(|&(_, m)| m).collect();
        let a_is = if flavor.uses_is() {
            attention_batch(&params.attn_is, &ms)?
        } else {
            Vec::new()
        };
        let (a_em, p) = if flavor.uses_em() {
            (
                attention_batch(&params.attn_em, &ms)?,
                BatchAffine::new(&params.proj.w, &params.proj.b)?.apply(&ms)?,
            )
        } else {
            (Vec::new(), Vec::new())
        };
        pairs
            .iter()
            .enumerate()
            .map(|(i, (r, _))| {
                fn at(v: &[Vec<f64>], i: usize) -> Option<&[f64]> {
                    v.get(i).map(Vec::as_slice)
                }
                assemble(flavor, r, at(&a_is, i), at(&a_em, i), at(&p, i))
            })
            .collect()
    }

    fn width(&self) -> usize {
        match self {
            PreparedQuery::Dense { q } => q.len(),
            PreparedQuery::Gated { w } => w.len(),
            PreparedQuery::Both { w } => w.len(),
        }
    }

    /// Score against gallery item `k`.
    ///
    /// # Panics
    /// If `gallery` was prepared for a flavor of another kind.
    pub fn score(&self, gallery: &PreparedGallery, k: usize) -> Result<f64> {
        let t = gallery.row(k);
        match self {
            PreparedQuery::Dense { q } => {
                let n = gallery.norms[k];
                guard_norm(n)?;
                Ok(dense_sum(t, q) / n)
            }
            PreparedQuery::Gated { w } => {
                let [num, den] = gated_sums(t, w);
                let den = den.sqrt();
                guard_norm(den)?;
                Ok(num / den)
            }
            PreparedQuery::Both { w } => {
                let [num_is, den_is, num_em, den_em] = both_sums(t, w);
                let (den_is, den_em) = (den_is.sqrt(), den_em.sqrt());
                guard_norm(den_is)?;
                guard_norm(den_em)?;
                Ok(num_em / den_em + num_is / den_is)
            }
        }
    }

    /// Scores against the whole gallery.
    pub fn score_all(&self, gallery: &PreparedGallery) -> Result<Vec<f64>> {
        if self.width() != gallery.dim {
            return Err(Error::shape(format!(
                "query width {} against gallery width {}",
                self.width(),
                gallery.dim
            )));
        }
        (0..gallery.len()).map(|k| self.score(gallery, k)).collect()
    }
}

/// Maps `f` over `items` on `threads` workers (0 = all cores, 1 = the
/// calling thread). Output order follows `items`.
pub(crate) fn map_parallel<T: Sync, R: Send>(
    threads: usize,
    items: &[T],
    f: impl Fn(&T) -> Result<R> + Sync + Send,
) -> Result<Vec<R>> {
    if threads == 1 {
        return items.iter().map(f).collect();
    }
    let run = || items.par_iter().map(&f).collect();
    match rayon::ThreadPoolBuilder::new().num_threads(threads).build() {
        Ok(pool) => pool.install(run),
        Err(_) => run(),
    }
}

/// Scores prepared queries against a prepared gallery, one row per query.
pub fn score_prepared(
    threads: usize,
    queries: &[PreparedQuery],
    gallery: &PreparedGallery,
) -> Result<Vec<Vec<f64>>> {
    map_parallel(threads, queries, |q| q.score_all(gallery))
}

/// Queries encoded together by one worker in [`score_matrix`].
const ENCODE_CHUNK: usize = 64;

/// Score matrix of `queries` against the dataset gallery. `threads` = 0
/// uses every available core; output does not depend on it.
pub fn score_matrix(
    queries: &[QuerySpec],
    dataset: &Dataset,
    params: &HeadParams,
    flavor: Flavor,
    threads: usize,
) -> Result<ScoreMatrix> {
    let rows = dataset
        .gallery
        .iter()
        .map(|id| dataset.images.require(id))
        .collect::<Result<Vec<_>>>()?;
    let gallery = PreparedGallery::new(dataset.images.dim(), rows, flavor)?;
    let pairs = queries
        .iter()
        .map(|q| {
            Ok((
                dataset.images.require(&q.ref_id)?,
                dataset.modifiers.require(&q.mod_id)?,
            ))
        })
        .collect::<Result<Vec<_>>>()?;
    let chunks: Vec<_> = pairs.chunks(ENCODE_CHUNK).collect();
    let prepared = map_parallel(threads, &chunks, |c| {
        PreparedQuery::batch(c, params, flavor)
    })?
    .concat();
    let per_query = score_prepared(threads, &prepared, &gallery)?;
    Ok(ScoreMatrix {
        gallery: dataset.gallery.clone(),
        rows: queries.len(),
        values: per_query.concat(),
    })
}
