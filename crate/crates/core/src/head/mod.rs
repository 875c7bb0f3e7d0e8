//! The scoring head: two modifier-driven attention MLPs, a modifier
//! projection, a temperature, and the six scoring flavors.

mod checkpoint;
mod graph;

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC,
};
pub use graph::{HeadVars, QueryVars};

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{cosine, hadamard, mlp2, softmax, weighted_cosine, Mat64};

/// Initial temperature.
pub const INITIAL_GAMMA: f64 = 10.0;
/// Lower bound kept on the temperature after every optimizer step.
pub const MIN_GAMMA: f64 = 1e-3;

/// Widths of the modifier embedding, the image embedding and the attention
/// hidden layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeadDims {
    pub text: usize,
    pub image: usize,
    pub hidden: usize,
}

impl HeadDims {
    pub fn new(text: usize, image: usize, hidden: usize) -> Self {
        Self {
            text,
            image,
            hidden,
        }
    }

    /// Same width everywhere.
    pub fn square(n: usize) -> Self {
        Self::new(n, n, n)
    }

    fn validate(&self) -> Result<()> {
        if self.text == 0 || self.image == 0 || self.hidden == 0 {
            return Err(Error::shape(format!(
                "head dims must be positive, got {self:?}"
            )));
        }
        Ok(())
    }
}

impl Default for HeadDims {
    fn default() -> Self {
        Self::square(512)
    }
}

/// Two-layer MLP `text -> hidden -> image` followed by a softmax.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionParams {
    pub w1: Mat64,
    pub b1: Vec<f64>,
    pub w2: Mat64,
    pub b2: Vec<f64>,
}

/// Linear map from the modifier space into the image space.
#[derive(Debug, Clone, PartialEq)]
pub struct Projection {
    pub w: Mat64,
    pub b: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadParams {
    pub dims: HeadDims,
    pub attn_is: AttentionParams,
    pub attn_em: AttentionParams,
    pub proj: Projection,
    pub gamma: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttentionKind {
    Is,
    Em,
}

/// Scoring variants, in ablation-table order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Flavor {
    ImageOnly,
    TextOnly,
    LateFusion,
    IsOnly,
    EmOnly,
    Artemis,
}

impl Flavor {
    pub const ALL: [Flavor; 6] = [
        Flavor::ImageOnly,
        Flavor::TextOnly,
        Flavor::LateFusion,
        Flavor::IsOnly,
        Flavor::EmOnly,
        Flavor::Artemis,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Flavor::ImageOnly => "image_only",
            Flavor::TextOnly => "text_only",
            Flavor::LateFusion => "late_fusion",
            Flavor::IsOnly => "is_only",
            Flavor::EmOnly => "em_only",
            Flavor::Artemis => "artemis",
        }
    }

    pub fn uses_is(self) -> bool {
        matches!(self, Flavor::IsOnly | Flavor::Artemis)
    }

    pub fn uses_em(self) -> bool {
        matches!(self, Flavor::EmOnly | Flavor::Artemis)
    }
}

impl fmt::Display for Flavor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Flavor {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Flavor::ALL
            .into_iter()
            .find(|f| f.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown flavor {s:?}")))
    }
}

fn glorot(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Mat64 {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    let data = (0..rows * cols)
        .map(|_| rng.gen_range(-limit..=limit))
        .collect();
    Mat64::new(rows, cols, data).expect("glorot matrix is well formed")
}

impl AttentionParams {
    fn init(rng: &mut ChaCha8Rng, dims: HeadDims) -> Self {
        let w1 = glorot(rng, dims.hidden, dims.text);
        let w2 = glorot(rng, dims.image, dims.hidden);
        Self {
            w1,
            b1: vec![0.0; dims.hidden],
            w2,
            b2: vec![0.0; dims.image],
        }
    }

    fn zeros(dims: HeadDims) -> Self {
        Self {
            w1: Mat64::zeros(dims.hidden, dims.text),
            b1: vec![0.0; dims.hidden],
            w2: Mat64::zeros(dims.image, dims.hidden),
            b2: vec![0.0; dims.image],
        }
    }

    /// Attention weights for modifier `m`: a probability vector over image
    /// dimensions.
    pub fn forward(&self, m: &[f64]) -> Result<Vec<f64>> {
        Ok(softmax(&mlp2(m, &self.w1, &self.b1, &self.w2, &self.b2)?))
    }
}

impl Projection {
    pub fn forward(&self, m: &[f64]) -> Result<Vec<f64>> {
        self.w.affine(m, &self.b)
    }
}

impl HeadParams {
    /// Glorot-uniform weights, zero biases, `gamma = 10`.
    pub fn init(dims: HeadDims, seed: u64) -> Result<Self> {
        dims.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let attn_is = AttentionParams::init(&mut rng, dims);
        let attn_em = AttentionParams::init(&mut rng, dims);
        let proj = Projection {
            w: glorot(&mut rng, dims.image, dims.text),
            b: vec![0.0; dims.image],
        };
        Ok(Self {
            dims,
            attn_is,
            attn_em,
            proj,
            gamma: INITIAL_GAMMA,
        })
    }

    /// All weights and biases zero; both attentions are then uniform.
    pub fn zeros(dims: HeadDims) -> Result<Self> {
        dims.validate()?;
        Ok(Self {
            dims,
            attn_is: AttentionParams::zeros(dims),
            attn_em: AttentionParams::zeros(dims),
            proj: Projection {
                w: Mat64::zeros(dims.image, dims.text),
                b: vec![0.0; dims.image],
            },
            gamma: INITIAL_GAMMA,
        })
    }

    pub fn attention_params(&self, which: AttentionKind) -> &AttentionParams {
        match which {
            AttentionKind::Is => &self.attn_is,
            AttentionKind::Em => &self.attn_em,
        }
    }

    /// Parameter blocks in checkpoint order (`gamma` excluded).
    pub fn blocks(&self) -> [&[f64]; 10] {
        [
            self.attn_is.w1.as_slice(),
            &self.attn_is.b1,
            self.attn_is.w2.as_slice(),
            &self.attn_is.b2,
            self.attn_em.w1.as_slice(),
            &self.attn_em.b1,
            self.attn_em.w2.as_slice(),
            &self.attn_em.b2,
            self.proj.w.as_slice(),
            &self.proj.b,
        ]
    }

    fn blocks_mut(&mut self) -> [&mut [f64]; 10] {
        [
            self.attn_is.w1.as_mut_slice(),
            &mut self.attn_is.b1,
            self.attn_is.w2.as_mut_slice(),
            &mut self.attn_is.b2,
            self.attn_em.w1.as_mut_slice(),
            &mut self.attn_em.b1,
            self.attn_em.w2.as_mut_slice(),
            &mut self.attn_em.b2,
            self.proj.w.as_mut_slice(),
            &mut self.proj.b,
        ]
    }

    /// Expected block lengths for `dims`, in checkpoint order.
    pub fn block_lens(dims: HeadDims) -> [usize; 10] {
        let HeadDims {
            text,
            image,
            hidden,
        } = dims;
        let attn = [hidden * text, hidden, image * hidden, image];
        [
            attn[0],
            attn[1],
            attn[2],
            attn[3],
            attn[0],
            attn[1],
            attn[2],
            attn[3],
            image * text,
            image,
        ]
    }

    /// Number of trainable scalars including `gamma`.
    pub fn len(&self) -> usize {
        Self::block_lens(self.dims).iter().sum::<usize>() + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Flattens every parameter in checkpoint order; `gamma` is last.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.len());
        for b in self.blocks() {
            out.extend_from_slice(b);
        }
        out.push(self.gamma);
        out
    }

    /// Inverse of [`HeadParams::to_flat`].
    pub fn from_flat(dims: HeadDims, flat: &[f64]) -> Result<Self> {
        let mut params = Self::zeros(dims)?;
        params.set_flat(flat)?;
        Ok(params)
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.len() {
            return Err(Error::shape(format!(
                "expected {} parameters, got {}",
                self.len(),
                flat.len()
            )));
        }
        if let Some(i) = flat.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("parameter {i}")));
        }
        let mut offset = 0;
        for block in self.blocks_mut() {
            let n = block.len();
            block.copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        self.gamma = flat[offset];
        Ok(())
    }

    fn check_query(&self, r: Option<&[f64]>, m: &[f64], t: &[f64]) -> Result<()> {
        let d = self.dims;
        if m.len() != d.text {
            return Err(Error::shape(format!(
                "modifier has {} dims, head expects {}",
                m.len(),
                d.text
            )));
        }
        if t.len() != d.image {
            return Err(Error::shape(format!(
                "target has {} dims, head expects {}",
                t.len(),
                d.image
            )));
        }
        if let Some(r) = r {
            if r.len() != d.image {
                return Err(Error::shape(format!(
                    "reference has {} dims, head expects {}",
                    r.len(),
                    d.image
                )));
            }
        }
        Ok(())
    }
}

/// Attention vector in `[0, 1]^image` predicted from modifier `m`.
pub fn attention(m: &[f64], which: AttentionKind, params: &HeadParams) -> Result<Vec<f64>> {
    if m.len() != params.dims.text {
        return Err(Error::shape(format!(
            "modifier has {} dims, head expects {}",
            m.len(),
            params.dims.text
        )));
    }
    params.attention_params(which).forward(m)
}

/// Implicit similarity: reference and target compared after both are
/// reweighted by the modifier's attention.
pub fn score_is(r: &[f64], m: &[f64], t: &[f64], params: &HeadParams) -> Result<f64> {
    params.check_query(Some(r), m, t)?;
    let a = params.attn_is.forward(m)?;
    weighted_cosine(&a, r, t)
}

/// Explicit matching: projected modifier against the reweighted target.
pub fn score_em(m: &[f64], t: &[f64], params: &HeadParams) -> Result<f64> {
    params.check_query(None, m, t)?;
    let a = params.attn_em.forward(m)?;
    let p = params.proj.forward(m)?;
    cosine(&p, &hadamard(&a, t))
}

/// Compatibility score of `(r, m, t)` under `flavor`.
pub fn score(r: &[f64], m: &[f64], t: &[f64], params: &HeadParams, flavor: Flavor) -> Result<f64> {
    match flavor {
        Flavor::ImageOnly => {
            check_same(r, t, "image_only")?;
            cosine(r, t)
        }
        Flavor::TextOnly => {
            check_same(m, t, "text_only")?;
            cosine(m, t)
        }
        Flavor::LateFusion => {
            check_same(r, m, "late_fusion")?;
            check_same(r, t, "late_fusion")?;
            let fused: Vec<f64> = r.iter().zip(m).map(|(a, b)| a + b).collect();
            cosine(&fused, t)
        }
        Flavor::IsOnly => score_is(r, m, t, params),
        Flavor::EmOnly => score_em(m, t, params),
        Flavor::Artemis => Ok(score_em(m, t, params)? + score_is(r, m, t, params)?),
    }
}

fn check_same(a: &[f64], b: &[f64], what: &str) -> Result<()> {
    if a.len() == b.len() {
        Ok(())
    } else {
        Err(Error::shape(format!(
            "{what} needs equal widths, got {} and {}",
            a.len(),
            b.len()
        )))
    }
}

/// Trainable scalar count: weights, biases and `gamma`.
pub fn head_param_count(params: &HeadParams) -> u64 {
    params.len() as u64
}

/// Multiply-accumulates of one head forward pass on one triplet.
pub fn head_mac_count(dims: HeadDims) -> u64 {
    let HeadDims {
        text,
        image,
        hidden,
    } = dims;
    let (text, image, hidden) = (text as u64, image as u64, hidden as u64);
    2 * (text * hidden + hidden * image) + text * image + 6 * image
}
