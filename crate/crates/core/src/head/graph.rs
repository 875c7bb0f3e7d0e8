//! Head forward pass recorded on a [`Tape`] for training.

use super::{AttentionParams, Flavor, HeadParams};
use crate::error::Result;
use crate::numerics::{Gradients, Tape, Var};

#[derive(Debug, Clone, Copy)]
struct AttentionVars {
    w1: Var,
    b1: Var,
    w2: Var,
    b2: Var,
}

impl AttentionVars {
    fn register(tape: &mut Tape, p: &AttentionParams) -> Result<Self> {
        Ok(Self {
            w1: tape.matrix(p.w1.rows(), p.w1.cols(), p.w1.as_slice().to_vec())?,
            b1: tape.leaf(p.b1.clone()),
            w2: tape.matrix(p.w2.rows(), p.w2.cols(), p.w2.as_slice().to_vec())?,
            b2: tape.leaf(p.b2.clone()),
        })
    }

    fn forward(&self, tape: &mut Tape, m: Var) -> Result<Var> {
        let hidden = tape.affine(self.w1, m, self.b1)?;
        let hidden = tape.relu(hidden);
        let logits = tape.affine(self.w2, hidden, self.b2)?;
        Ok(tape.softmax(logits))
    }
}

/// Every head parameter as a leaf on one tape.
#[derive(Debug, Clone, Copy)]
pub struct HeadVars {
    attn_is: AttentionVars,
    attn_em: AttentionVars,
    proj_w: Var,
    proj_b: Var,
    pub gamma: Var,
}

/// Per-query intermediate nodes, computed once and reused for every target.
#[derive(Debug, Clone, Copy)]
pub struct QueryVars {
    r: Var,
    m: Var,
    fused: Option<Var>,
    a_is: Option<Var>,
    a_em: Option<Var>,
    proj: Option<Var>,
}

impl HeadVars {
    pub fn register(tape: &mut Tape, params: &HeadParams) -> Result<Self> {
        let attn_is = AttentionVars::register(tape, &params.attn_is)?;
        let attn_em = AttentionVars::register(tape, &params.attn_em)?;
        let proj_w = tape.matrix(
            params.proj.w.rows(),
            params.proj.w.cols(),
            params.proj.w.as_slice().to_vec(),
        )?;
        let proj_b = tape.leaf(params.proj.b.clone());
        let gamma = tape.scalar(params.gamma);
        Ok(Self {
            attn_is,
            attn_em,
            proj_w,
            proj_b,
            gamma,
        })
    }

    /// Leaves in checkpoint order, `gamma` last.
    fn leaves(&self) -> [Var; 11] {
        let (a, e) = (self.attn_is, self.attn_em);
        [
            a.w1,
            a.b1,
            a.w2,
            a.b2,
            e.w1,
            e.b1,
            e.w2,
            e.b2,
            self.proj_w,
            self.proj_b,
            self.gamma,
        ]
    }

    /// Gradient flattened in the layout of [`HeadParams::to_flat`].
    pub fn flat_gradient(&self, grads: &Gradients) -> Vec<f64> {
        self.leaves().iter().flat_map(|v| grads.get(*v)).collect()
    }

    pub fn encode_query(
        &self,
        tape: &mut Tape,
        r: &[f64],
        m: &[f64],
        flavor: Flavor,
    ) -> Result<QueryVars> {
        let r = tape.leaf(r.to_vec());
        let m = tape.leaf(m.to_vec());
        let fused = match flavor {
            Flavor::LateFusion => Some(tape.add(r, m)?),
            _ => None,
        };
        let a_is = if flavor.uses_is() {
            Some(self.attn_is.forward(tape, m)?)
        } else {
            None
        };
        let (a_em, proj) = if flavor.uses_em() {
            let a = self.attn_em.forward(tape, m)?;
            let p = tape.affine(self.proj_w, m, self.proj_b)?;
            (Some(a), Some(p))
        } else {
            (None, None)
        };
        Ok(QueryVars {
            r,
            m,
            fused,
            a_is,
            a_em,
            proj,
        })
    }

    /// Score node for an encoded query against target leaf `t`.
    pub fn pair_score(
        &self,
        tape: &mut Tape,
        q: &QueryVars,
        t: Var,
        flavor: Flavor,
    ) -> Result<Var> {
        let is = |tape: &mut Tape| tape.weighted_cosine(q.a_is.expect("is attention"), q.r, t);
        let em = |tape: &mut Tape| -> Result<Var> {
            let reweighted = tape.hadamard(q.a_em.expect("em attention"), t)?;
            tape.cosine(q.proj.expect("projection"), reweighted)
        };
        match flavor {
            Flavor::ImageOnly => tape.cosine(q.r, t),
            Flavor::TextOnly => tape.cosine(q.m, t),
            Flavor::LateFusion => tape.cosine(q.fused.expect("fused query"), t),
            Flavor::IsOnly => is(tape),
            Flavor::EmOnly => em(tape),
            Flavor::Artemis => {
                let e = em(tape)?;
                let i = is(tape)?;
                tape.add(e, i)
            }
        }
    }
}
