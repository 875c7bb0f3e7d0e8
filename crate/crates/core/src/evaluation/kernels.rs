//! Inner loops of gallery scoring.
//!
//! Every score is a few weighted sums over one target row `t`, each of the
//! form `Σ w·t` or `Σ w·t²`, accumulated in eight interleaved partial sums
//! (element `i` goes to lane `i % 8`) so that independent multiply-adds can
//! overlap. On x86-64 CPUs with AVX2 and FMA the lanes live in two vector
//! registers per sum and use fused multiply-add, chosen once per process;
//! results are deterministic on a given machine either way.

use crate::numerics::{combine, LANES};

/// Partial sums per stream: two interleaved blocks of [`LANES`].
const WIDE: usize = 2 * LANES;

/// Target entries ahead of the current block requested into cache; the
/// gallery is contiguous, so this runs into the next row.
const PREFETCH: usize = 256;

/// Folds the eight partial sums of one stream: lane `j` plus lane `j + 4`,
/// then the pairwise four-lane combine.
#[inline(always)]
fn fold(acc: [f64; WIDE]) -> f64 {
    combine(std::array::from_fn(|j| acc[j] + acc[j + LANES]))
}

/// Eight weights on one cache line.
#[derive(Debug, Clone, Copy, PartialEq)]
#[repr(C, align(64))]
struct Block([f64; WIDE]);

const _: () = assert!(std::mem::size_of::<Block>() == WIDE * std::mem::size_of::<f64>());

/// Query-side weight streams interleaved block by block: for each run of
/// eight target entries, the eight weights of stream 0, then stream 1, and
/// so on. The last block is zero-padded.
#[derive(Debug, Clone, PartialEq)]
pub struct Packed<const N: usize> {
    len: usize,
    data: Vec<Block>,
}

impl<const N: usize> Packed<N> {
    /// # Panics
    /// If the streams differ in length.
    pub fn new(streams: [&[f64]; N]) -> Self {
        let len = streams.first().map_or(0, |s| s.len());
        assert!(
            streams.iter().all(|s| s.len() == len),
            "weight streams differ in length"
        );
        let blocks = len.div_ceil(WIDE);
        let mut data = vec![Block([0.0; WIDE]); blocks * N];
        for (k, s) in streams.iter().enumerate() {
            for (i, &v) in s.iter().enumerate() {
                data[(i / WIDE) * N + k].0[i % WIDE] = v;
            }
        }
        Self { len, data }
    }

    /// The blocks as one flat slice.
    fn flat(&self) -> &[f64] {
        // SAFETY: `Block` is `repr(C)` over `[f64; WIDE]` and its 64-byte
        // size equals that array's, so the blocks are contiguous `f64`s.
        unsafe {
            std::slice::from_raw_parts(self.data.as_ptr().cast::<f64>(), self.data.len() * WIDE)
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }
}

/// `Σ w_k·t` (or `Σ w_k·t²` where `squared[k]`) for every stream `k`.
#[inline(always)]
fn sums<const N: usize>(t: &[f64], w: &Packed<N>, squared: [bool; N]) -> [f64; N] {
    let mut acc = [[0.0; WIDE]; N];
    let body = t.len() - t.len() % WIDE;
    for (x, block) in t[..body]
        .chunks_exact(WIDE)
        .zip(w.flat().chunks_exact(N * WIDE))
    {
        for k in 0..N {
            let w = &block[k * WIDE..(k + 1) * WIDE];
            for j in 0..WIDE {
                let v = if squared[k] { x[j] * x[j] } else { x[j] };
                acc[k][j] += w[j] * v;
            }
        }
    }
    tail_sums(t, w, squared, body, &mut acc, |a, b, c| a * b + c);
    acc.map(fold)
}

#[inline(always)]
fn tail_sums<const N: usize>(
    t: &[f64],
    w: &Packed<N>,
    squared: [bool; N],
    body: usize,
    acc: &mut [[f64; WIDE]; N],
    madd: impl Fn(f64, f64, f64) -> f64,
) {
    let block = &w.flat()[(body / WIDE) * N * WIDE..];
    for (j, &x) in t[body..].iter().enumerate() {
        for k in 0..N {
            let v = if squared[k] { x * x } else { x };
            acc[k][j] = madd(block[k * WIDE + j], v, acc[k][j]);
        }
    }
}

#[cfg(target_arch = "x86_64")]
mod fused {
    use super::*;
    use std::arch::x86_64::*;

    /// Unaligned load of the first four entries of `v`.
    #[inline(always)]
    unsafe fn load(v: &[f64]) -> __m256d {
        std::ptr::read_unaligned(v.as_ptr() as *const __m256d)
    }

    /// Same lane layout as [`sums`], with fused multiply-add.
    #[inline(always)]
    unsafe fn sums_fma<const N: usize>(t: &[f64], w: &Packed<N>, squared: [bool; N]) -> [f64; N] {
        let mut lo = [_mm256_setzero_pd(); N];
        let mut hi = [_mm256_setzero_pd(); N];
        let body = t.len() - t.len() % WIDE;
        let blocks = t[..body]
            .chunks_exact(WIDE)
            .zip(w.flat().chunks_exact(N * WIDE));
        for (b, (x, block)) in blocks.enumerate() {
            _mm_prefetch::<_MM_HINT_T0>(t.as_ptr().wrapping_add(b * WIDE + PREFETCH) as *const i8);
            let x0 = load(x);
            let x1 = load(&x[LANES..]);
            let (q0, q1) = (_mm256_mul_pd(x0, x0), _mm256_mul_pd(x1, x1));
            for k in 0..N {
                let (v0, v1) = if squared[k] { (q0, q1) } else { (x0, x1) };
                let wk = &block[k * WIDE..(k + 1) * WIDE];
                lo[k] = _mm256_fmadd_pd(load(wk), v0, lo[k]);
                hi[k] = _mm256_fmadd_pd(load(&wk[LANES..]), v1, hi[k]);
            }
        }
        let mut acc = [[0.0; WIDE]; N];
        for k in 0..N {
            _mm256_storeu_pd(acc[k].as_mut_ptr(), lo[k]);
            _mm256_storeu_pd(acc[k].as_mut_ptr().add(LANES), hi[k]);
        }
        tail_sums(t, w, squared, body, &mut acc, f64::mul_add);
        acc.map(fold)
    }

    #[target_feature(enable = "avx2,fma")]
    pub unsafe fn dot(t: &[f64], w: &Packed<1>) -> f64 {
        sums_fma(t, w, [false])[0]
    }

    #[target_feature(enable = "avx2,fma")]
    pub unsafe fn gated(t: &[f64], w: &Packed<2>) -> [f64; 2] {
        sums_fma(t, w, [false, true])
    }

    #[target_feature(enable = "avx2,fma")]
    pub unsafe fn both(t: &[f64], w: &Packed<4>) -> [f64; 4] {
        sums_fma(t, w, [false, true, false, true])
    }

    #[target_feature(enable = "avx2,fma")]
    pub unsafe fn quad(t: &[f64], w: &Packed<4>) -> [f64; 4] {
        sums_fma(t, w, [false; 4])
    }

    pub fn available() -> bool {
        use std::sync::OnceLock;
        static AVAILABLE: OnceLock<bool> = OnceLock::new();
        *AVAILABLE
            .get_or_init(|| is_x86_feature_detected!("avx2") && is_x86_feature_detected!("fma"))
    }
}

fn check<const N: usize>(t: &[f64], w: &Packed<N>) {
    assert_eq!(t.len(), w.len, "weights and target row differ in length");
}

/// `Σ w·t`.
pub fn dense_sum(t: &[f64], w: &Packed<1>) -> f64 {
    check(t, w);
    #[cfg(target_arch = "x86_64")]
    if fused::available() {
        // SAFETY: the required CPU features were detected at runtime, and
        // `check` guarantees `w` holds every block read for `t`.
        return unsafe { fused::dot(t, w) };
    }
    sums(t, w, [false])[0]
}

/// `[Σ w0·t, Σ w1·t²]`.
pub fn gated_sums(t: &[f64], w: &Packed<2>) -> [f64; 2] {
    check(t, w);
    #[cfg(target_arch = "x86_64")]
    if fused::available() {
        // SAFETY: as in `dense_sum`.
        return unsafe { fused::gated(t, w) };
    }
    sums(t, w, [false, true])
}

/// `[Σ w0·t, Σ w1·t², Σ w2·t, Σ w3·t²]` in one pass over `t`.
pub fn both_sums(t: &[f64], w: &Packed<4>) -> [f64; 4] {
    check(t, w);
    #[cfg(target_arch = "x86_64")]
    if fused::available() {
        // SAFETY: as in `dense_sum`.
        return unsafe { fused::both(t, w) };
    }
    sums(t, w, [false, true, false, true])
}

/// `[Σ w0·t, Σ w1·t, Σ w2·t, Σ w3·t]` in one pass over `t`.
pub fn quad_sums(t: &[f64], w: &Packed<4>) -> [f64; 4] {
    check(t, w);
    #[cfg(target_arch = "x86_64")]
    if fused::available() {
        // SAFETY: as in `dense_sum`.
        return unsafe { fused::quad(t, w) };
    }
    sums(t, w, [false; 4])
}
