//! Dense `f64` vector/matrix primitives and a small reverse-mode tape.
//!
//! Every reduction sums sequentially in ascending index order, so results
//! (and therefore score ties) are reproducible bit for bit.

mod gradcheck;
mod tape;

pub use gradcheck::{finite_diff_check, GradCheckConfig, GradCheckReport, ScalarFunction};
pub use tape::{Gradients, Tape, Var};

use std::ops::Deref;

use crate::error::{Error, Result};

/// Guard under which a norm is treated as zero.
pub const NORM_EPS: f64 = 1e-12;

/// A nonempty vector of finite `f64` values.
#[derive(Debug, Clone, PartialEq)]
pub struct Vec64(Vec<f64>);

impl Vec64 {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::EmptyInput("vector"));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("vector entry {i}")));
        }
        Ok(Self(values))
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

impl Deref for Vec64 {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl TryFrom<Vec<f64>> for Vec64 {
    type Error = Error;

    fn try_from(values: Vec<f64>) -> Result<Self> {
        Self::new(values)
    }
}

/// Row-major matrix of finite `f64` values. `matvec` maps `cols -> rows`.
#[derive(Debug, Clone, PartialEq)]
pub struct Mat64 {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Mat64 {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::shape(format!(
                "matrix {rows}x{cols} has a zero side"
            )));
        }
        if data.len() != rows * cols {
            return Err(Error::shape(format!(
                "matrix {rows}x{cols} needs {} entries, got {}",
                rows * cols,
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("matrix entry {i}")));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    /// `self · x + bias`.
    pub fn affine(&self, x: &[f64], bias: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.cols || bias.len() != self.rows {
            return Err(Error::shape(format!(
                "affine map {}x{} applied to input {} with bias {}",
                self.rows,
                self.cols,
                x.len(),
                bias.len()
            )));
        }
        Ok((0..self.rows)
            .map(|i| dot(self.row(i), x) + bias[i])
            .collect())
    }
}

/// Number of interleaved partial sums used by the reductions.
pub const LANES: usize = 4;

/// Independent accumulator blocks of [`LANES`] used by [`dot`].
const BLOCKS: usize = 4;

/// Dot product accumulated in `BLOCKS * LANES` interleaved partial sums
/// (element `i` goes to sum `i % 16`). Blocks are added pairwise lane by
/// lane, then the lanes are combined pairwise. The order is fixed, so
/// results are deterministic. Panics if lengths differ.
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "dot of unequal lengths");
    const WIDTH: usize = BLOCKS * LANES;
    let mut acc = [0.0; WIDTH];
    let (ca, cb) = (a.chunks_exact(WIDTH), b.chunks_exact(WIDTH));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for j in 0..WIDTH {
            acc[j] += x[j] * y[j];
        }
    }
    for (j, (x, y)) in ra.iter().zip(rb).enumerate() {
        acc[j] += x * y;
    }
    combine(std::array::from_fn(|j| {
        let block = |k: usize| acc[k * LANES + j];
        (block(0) + block(1)) + (block(2) + block(3))
    }))
}

/// Pairwise sum of lane accumulators.
pub fn combine(acc: [f64; LANES]) -> f64 {
    (acc[0] + acc[1]) + (acc[2] + acc[3])
}

pub fn norm(x: &[f64]) -> f64 {
    dot(x, x).sqrt()
}

pub fn hadamard(a: &[f64], b: &[f64]) -> Vec<f64> {
    assert_eq!(a.len(), b.len(), "hadamard of unequal lengths");
    a.iter().zip(b).map(|(x, y)| x * y).collect()
}

pub fn relu(x: &[f64]) -> Vec<f64> {
    x.iter().map(|&v| v.max(0.0)).collect()
}

pub fn l2_normalize(x: &[f64]) -> Result<Vec<f64>> {
    let n = norm(x);
    if !(n > NORM_EPS) {
        return Err(Error::NearZeroNorm { norm: n });
    }
    Ok(x.iter().map(|v| v / n).collect())
}

/// Softmax with max subtraction.
pub fn softmax(x: &[f64]) -> Vec<f64> {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = x.iter().map(|v| (v - max).exp()).collect();
    let mut total = 0.0;
    for e in &exps {
        total += e;
    }
    exps.into_iter().map(|e| e / total).collect()
}

/// `W2 · relu(W1 · m + b1) + b2`.
pub fn mlp2(m: &[f64], w1: &Mat64, b1: &[f64], w2: &Mat64, b2: &[f64]) -> Result<Vec<f64>> {
    if w2.cols() != w1.rows() {
        return Err(Error::shape(format!(
            "mlp layers {}x{} then {}x{}",
            w1.rows(),
            w1.cols(),
            w2.rows(),
            w2.cols()
        )));
    }
    let hidden = relu(&w1.affine(m, b1)?);
    w2.affine(&hidden, b2)
}

pub fn cosine(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::shape(format!(
            "cosine of lengths {} and {}",
            x.len(),
            y.len()
        )));
    }
    let nx = norm(x);
    let ny = norm(y);
    guard_norm(nx)?;
    guard_norm(ny)?;
    Ok(dot(x, y) / (nx * ny))
}

/// Cosine of `a ⊙ x` and `a ⊙ y`. Symmetric in `x` and `y` bit for bit.
pub fn weighted_cosine(a: &[f64], x: &[f64], y: &[f64]) -> Result<f64> {
    if a.len() != x.len() || a.len() != y.len() {
        return Err(Error::shape(format!(
            "weighted cosine of lengths {}, {}, {}",
            a.len(),
            x.len(),
            y.len()
        )));
    }
    let u = hadamard(a, x);
    let v = hadamard(a, y);
    cosine(&u, &v)
}

pub(crate) fn guard_norm(n: f64) -> Result<()> {
    if n > NORM_EPS {
        Ok(())
    } else {
        Err(Error::NearZeroNorm { norm: n })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    fn random_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    #[test]
    fn normalize_examples() {
        assert!(close(
            &l2_normalize(&[3.0, 4.0]).unwrap(),
            &[0.6, 0.8],
            1e-15
        ));
        assert_eq!(l2_normalize(&[0.0, 0.0, 2.0]).unwrap(), vec![0.0, 0.0, 1.0]);
        assert!(matches!(
            l2_normalize(&[0.0, 1e-13]),
            Err(Error::NearZeroNorm { .. })
        ));
    }

    #[test]
    fn normalize_512_has_unit_norm() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = random_vec(&mut rng, 512);
        let y = l2_normalize(&x).unwrap();
        // Kahan-compensated sum of squares.
        let (mut sum, mut c) = (0.0f64, 0.0f64);
        for v in &y {
            let term = v * v - c;
            let t = sum + term;
            c = (t - sum) - term;
            sum = t;
        }
        assert!((sum.sqrt() - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn softmax_examples() {
        assert_eq!(softmax(&[0.0, 0.0]), vec![0.5, 0.5]);
        let big = softmax(&[1000.0, 0.0]);
        assert!(big.iter().all(|v| v.is_finite()));
        assert!((big[0] - 1.0).abs() < 1e-12 && big[1] < 1e-300);
        let e = std::f64::consts::E;
        let s = softmax(&[1.0, 0.0]);
        assert!((s[0] - e / (e + 1.0)).abs() < 1e-15);
        assert!((s[0] - 0.7311).abs() < 1e-4 && (s[1] - 0.2689).abs() < 1e-4);
    }

    #[test]
    fn mlp2_examples() {
        let id = Mat64::identity(2);
        let out = mlp2(&[1.0, -1.0], &id, &[0.0, 0.0], &id, &[0.0, 0.0]).unwrap();
        assert_eq!(out, vec![1.0, 0.0]);

        let z1 = Mat64::zeros(3, 4);
        let z2 = Mat64::zeros(2, 3);
        let out = mlp2(&[0.3, -2.0, 5.0, 1.0], &z1, &[0.0; 3], &z2, &[0.0; 2]).unwrap();
        assert_eq!(out, vec![0.0, 0.0]);

        assert!(matches!(
            mlp2(&[1.0, 2.0], &Mat64::zeros(3, 4), &[0.0; 3], &z2, &[0.0; 2]),
            Err(Error::ShapeMismatch(_))
        ));
    }

    #[test]
    fn mlp2_matches_scalar_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let w1 = random_vec(&mut rng, 12);
        let b1 = random_vec(&mut rng, 3);
        let w2 = random_vec(&mut rng, 6);
        let b2 = random_vec(&mut rng, 2);
        let m = random_vec(&mut rng, 4);

        let mut expected = [0.0f64; 2];
        let mut hidden = [0.0f64; 3];
        for h in 0..3 {
            let mut s = b1[h];
            for i in 0..4 {
                s += w1[h * 4 + i] * m[i];
            }
            hidden[h] = if s > 0.0 { s } else { 0.0 };
        }
        for o in 0..2 {
            let mut s = b2[o];
            for h in 0..3 {
                s += w2[o * 3 + h] * hidden[h];
            }
            expected[o] = s;
        }

        let got = mlp2(
            &m,
            &Mat64::new(3, 4, w1).unwrap(),
            &b1,
            &Mat64::new(2, 3, w2).unwrap(),
            &b2,
        )
        .unwrap();
        assert!(close(&got, &expected, 1e-12));
    }

    #[test]
    fn weighted_cosine_examples() {
        assert_eq!(
            weighted_cosine(&[0.5, 0.5], &[1.0, 0.0], &[0.0, 1.0]).unwrap(),
            0.0
        );
        let v = weighted_cosine(&[0.3, 0.9, 0.1], &[1.0, -2.0, 0.5], &[1.0, -2.0, 0.5]).unwrap();
        assert!((v - 1.0).abs() < 1e-15);
        let v = weighted_cosine(&[0.8, 0.2], &[1.0, 1.0], &[1.0, 0.0]).unwrap();
        assert!((v - 0.8 / 0.68f64.sqrt()).abs() < 1e-15);
        assert!((v - 0.9701).abs() < 1e-4);
        assert!(matches!(
            weighted_cosine(&[0.0, 1.0], &[1.0, 0.0], &[1.0, 1.0]),
            Err(Error::NearZeroNorm { .. })
        ));
    }

    #[test]
    fn mat64_rejects_bad_input() {
        assert!(Mat64::new(2, 2, vec![1.0; 3]).is_err());
        assert!(Mat64::new(1, 2, vec![1.0, f64::NAN]).is_err());
        assert!(Vec64::new(vec![]).is_err());
        assert!(Vec64::new(vec![f64::INFINITY]).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn finite_vec(n: std::ops::Range<usize>) -> impl Strategy<Value = Vec<f64>> {
            prop::collection::vec(-10.0f64..10.0, n)
        }

        proptest! {
            #[test]
            fn normalize_is_idempotent(x in finite_vec(1..64)) {
                prop_assume!(norm(&x) > 1e-6);
                let once = l2_normalize(&x).unwrap();
                let twice = l2_normalize(&once).unwrap();
                prop_assert!(close(&once, &twice, 1e-12));
            }

            #[test]
            fn softmax_shift_invariant(x in finite_vec(1..64), c in -500.0f64..500.0) {
                let shifted: Vec<f64> = x.iter().map(|v| v + c).collect();
                prop_assert!(close(&softmax(&x), &softmax(&shifted), 1e-12));
            }

            #[test]
            fn softmax_is_distribution_with_same_argmax(x in finite_vec(1..64)) {
                let s = softmax(&x);
                let total: f64 = s.iter().sum();
                prop_assert!((total - 1.0).abs() <= 1e-12);
                prop_assert!(s.iter().all(|&v| v > 0.0 && v <= 1.0));
                let argmax = |v: &[f64]| {
                    let mut best = 0;
                    for i in 1..v.len() {
                        if v[i] > v[best] {
                            best = i;
                        }
                    }
                    best
                };
                prop_assert_eq!(argmax(&x), argmax(&s));
            }

            #[test]
            fn weighted_cosine_symmetric_and_scale_invariant(
                a in finite_vec(8..9),
                x in finite_vec(8..9),
                y in finite_vec(8..9),
                ca in 0.01f64..100.0,
                cx in 0.01f64..100.0,
                cy in 0.01f64..100.0,
            ) {
                let a: Vec<f64> = a.iter().map(|v| v.abs() + 0.01).collect();
                prop_assume!(norm(&hadamard(&a, &x)) > 1e-3 && norm(&hadamard(&a, &y)) > 1e-3);
                let base = weighted_cosine(&a, &x, &y).unwrap();
                prop_assert_eq!(base, weighted_cosine(&a, &y, &x).unwrap());
                prop_assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&base));
                let sa: Vec<f64> = a.iter().map(|v| v * ca).collect();
                let sx: Vec<f64> = x.iter().map(|v| v * cx).collect();
                let sy: Vec<f64> = y.iter().map(|v| v * cy).collect();
                prop_assert!((weighted_cosine(&sa, &x, &y).unwrap() - base).abs() <= 1e-12);
                prop_assert!((weighted_cosine(&a, &sx, &y).unwrap() - base).abs() <= 1e-12);
                prop_assert!((weighted_cosine(&a, &x, &sy).unwrap() - base).abs() <= 1e-12);
            }
        }
    }
}
