//! Text-guided attention scoring head for composed image retrieval.
//!
//! A query is a reference image embedding `r` plus a text modifier embedding
//! `m`; candidates are target image embeddings `t`. The head combines two
//! scores:
//!
//! - *implicit similarity*: cosine between the reference and the target after
//!   both are reweighted by an attention vector predicted from the modifier;
//! - *explicit matching*: cosine between a linear projection of the modifier
//!   and the target reweighted by a second attention vector.
//!
//! Their sum ranks the gallery. The crate covers the head itself
//! ([`head`]), its training with an in-batch softmax classification loss and
//! AdamW ([`training`]), Recall@K style evaluation ([`evaluation`]), feature
//! bank and triplet file I/O plus a synthetic attribute-flip dataset
//! ([`datasets`]), and the ablation and latency harness ([`harness`]).
//!
//! All head arithmetic is done in `f64`; feature banks are stored as `f32`
//! and widened on load.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod datasets;
pub mod error;
pub mod evaluation;
pub mod harness;
pub mod head;
pub mod numerics;
pub mod training;

pub use error::{Error, Result};
pub use head::{Flavor, HeadDims, HeadParams};
