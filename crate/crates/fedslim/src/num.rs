//! Numeric primitives shared by the whole crate.
//!
//! Policy: tensors are stored in the scalar type `R` (f32 in production),
//! but every reduction  — dots, sums, norms, matmul accumulators — runs in
//! f64 with a fixed evaluation order, so results are reproducible across
//! runs and bit-identical between the in-process and the socket pipeline.
//! Instantiating the model with `R = f64` gives a pure double-precision
//! path used by the finite-difference gradient checks.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};
use std::fmt;
use std::ops::{Add, AddAssign, Div, Mul, MulAssign, Neg, Sub, SubAssign};

/// Scalar abstraction over f32/f64.
///
/// Transcendentals route through f64 so both instantiations compute the
/// same function and differ only in storage rounding.
pub trait Real:
    Copy
    + PartialOrd
    + Default
    + Send
    + Sync
    + fmt::Debug
    + fmt::Display
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + AddAssign
    + SubAssign
    + MulAssign
    + 'static
{
    const ZERO: Self;
    const ONE: Self;

    fn from_f64(x: f64) -> Self;
    fn to_f64(self) -> f64;

    fn exp(self) -> Self {
        Self::from_f64(self.to_f64().exp())
    }
    fn ln(self) -> Self {
        Self::from_f64(self.to_f64().ln())
    }
    fn sqrt(self) -> Self {
        Self::from_f64(self.to_f64().sqrt())
    }
    fn tanh(self) -> Self {
        Self::from_f64(self.to_f64().tanh())
    }
    fn is_finite(self) -> bool {
        self.to_f64().is_finite()
    }
}

impl Real for f32 {
    const ZERO: Self = 0.0;
    const ONE: Self = 1.0;

    fn from_f64(x: f64) -> Self {
        x as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    const ZERO: Self = 0.0;
    const ONE: Self = 1.0;

    fn from_f64(x: f64) -> Self {
        x
    }
    fn to_f64(self) -> f64 {
        self
    }
}

/// Dot product, f64 accumulation, four independent lanes combined as
/// `(l0+l1)+(l2+l3)`. The lane split is a function of length alone, so the
/// reduction order — and hence the rounding — is fixed for a given input.
pub fn dot<R: Real>(a: &[R], b: &[R]) -> f64 {
    assert_eq!(a.len(), b.len(), "dot: length mismatch");
    let n4 = a.len() / 4 * 4;
    let (mut l0, mut l1, mut l2, mut l3) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    let mut i = 0;
    while i < n4 {
        l0 += a[i].to_f64() * b[i].to_f64();
        l1 += a[i + 1].to_f64() * b[i + 1].to_f64();
        l2 += a[i + 2].to_f64() * b[i + 2].to_f64();
        l3 += a[i + 3].to_f64() * b[i + 3].to_f64();
        i += 4;
    }
    let mut tail = 0.0f64;
    while i < a.len() {
        tail += a[i].to_f64() * b[i].to_f64();
        i += 1;
    }
    (l0 + l1) + (l2 + l3) + tail
}

/// Sum with the same fixed four-lane reduction order as [`dot`].
pub fn sum<R: Real>(a: &[R]) -> f64 {
    let n4 = a.len() / 4 * 4;
    let (mut l0, mut l1, mut l2, mut l3) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    let mut i = 0;
    while i < n4 {
        l0 += a[i].to_f64();
        l1 += a[i + 1].to_f64();
        l2 += a[i + 2].to_f64();
        l3 += a[i + 3].to_f64();
        i += 4;
    }
    let mut tail = 0.0f64;
    while i < a.len() {
        tail += a[i].to_f64();
        i += 1;
    }
    (l0 + l1) + (l2 + l3) + tail
}

/// Sum of squares (f64 accumulation, fixed order).
pub fn sumsq<R: Real>(a: &[R]) -> f64 {
    dot(a, a)
}

/// Cosine similarity in f64. Zero-norm inputs yield 0 rather than NaN; the
/// call sites that must not see zero vectors validate that themselves.
pub fn cosine<R: Real>(a: &[R], b: &[R]) -> f64 {
    let num = dot(a, b);
    let na = sumsq(a).sqrt();
    let nb = sumsq(b).sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        num / (na * nb)
    }
}

/// `C[m×n] = A[m×k] · B[k×n]`, all row-major. Each output row is built in an
/// f64 accumulator; the k-loop order is fixed, so results are deterministic.
pub fn matmul<R: Real>(a: &[R], b: &[R], m: usize, k: usize, n: usize, out: &mut [R]) {
    assert_eq!(a.len(), m * k, "matmul: A shape");
    assert_eq!(b.len(), k * n, "matmul: B shape");
    assert_eq!(out.len(), m * n, "matmul: C shape");
    let mut acc = vec![0.0f64; n];
    for i in 0..m {
        acc.iter_mut().for_each(|v| *v = 0.0);
        let arow = &a[i * k..(i + 1) * k];
        for (kk, &aik) in arow.iter().enumerate() {
            let aik = aik.to_f64();
            if aik == 0.0 {
                continue;
            }
            let brow = &b[kk * n..(kk + 1) * n];
            for (j, &bkj) in brow.iter().enumerate() {
                acc[j] += aik * bkj.to_f64();
            }
        }
        for j in 0..n {
            out[i * n + j] = R::from_f64(acc[j]);
        }
    }
}

/// `C[m×k] = A[m×n] · B[k×n]ᵀ` (B used transposed). Rows of A and B are
/// contiguous, so each output element is a plain [`dot`].
pub fn matmul_nt<R: Real>(a: &[R], b: &[R], m: usize, n: usize, k: usize, out: &mut [R]) {
    assert_eq!(a.len(), m * n, "matmul_nt: A shape");
    assert_eq!(b.len(), k * n, "matmul_nt: B shape");
    assert_eq!(out.len(), m * k, "matmul_nt: C shape");
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        for kk in 0..k {
            let brow = &b[kk * n..(kk + 1) * n];
            out[i * k + kk] = R::from_f64(dot(arow, brow));
        }
    }
}

/// `C[k×n] = A[m×k]ᵀ · B[m×n]` (A used transposed). The whole k×n result is
/// accumulated in one f64 buffer over the m-loop, in fixed order.
pub fn matmul_tn<R: Real>(a: &[R], b: &[R], m: usize, k: usize, n: usize, out: &mut [R]) {
    assert_eq!(a.len(), m * k, "matmul_tn: A shape");
    assert_eq!(b.len(), m * n, "matmul_tn: B shape");
    assert_eq!(out.len(), k * n, "matmul_tn: C shape");
    let mut acc = vec![0.0f64; k * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let brow = &b[i * n..(i + 1) * n];
        for (kk, &aik) in arow.iter().enumerate() {
            let aik = aik.to_f64();
            if aik == 0.0 {
                continue;
            }
            let accrow = &mut acc[kk * n..(kk + 1) * n];
            for (j, &bij) in brow.iter().enumerate() {
                accrow[j] += aik * bij.to_f64();
            }
        }
    }
    for (o, &v) in out.iter_mut().zip(acc.iter()) {
        *o = R::from_f64(v);
    }
}

/// Adds `A[m×k]ᵀ · B[m×n]` into the f64 buffer `out[k×n]`. This is the
/// weight-gradient kernel: gradients accumulate across a whole batch in f64
/// and are rounded to storage precision exactly once.
pub fn matmul_tn_acc<R: Real>(a: &[R], b: &[R], m: usize, k: usize, n: usize, out: &mut [f64]) {
    assert_eq!(a.len(), m * k, "matmul_tn_acc: A shape");
    assert_eq!(b.len(), m * n, "matmul_tn_acc: B shape");
    assert_eq!(out.len(), k * n, "matmul_tn_acc: C shape");
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let brow = &b[i * n..(i + 1) * n];
        for (kk, &aik) in arow.iter().enumerate() {
            let aik = aik.to_f64();
            if aik == 0.0 {
                continue;
            }
            let accrow = &mut out[kk * n..(kk + 1) * n];
            for (j, &bij) in brow.iter().enumerate() {
                accrow[j] += aik * bij.to_f64();
            }
        }
    }
}

/// log(Σ exp(x_i)) computed stably in f64.
pub fn log_sum_exp<R: Real>(xs: &[R]) -> f64 {
    assert!(!xs.is_empty(), "log_sum_exp: empty input");
    let mut mx = f64::NEG_INFINITY;
    for &x in xs {
        let x = x.to_f64();
        if x > mx {
            mx = x;
        }
    }
    let mut s = 0.0f64;
    for &x in xs {
        s += (x.to_f64() - mx).exp();
    }
    mx + s.ln()
}

/// In-place softmax with f64 internals.
pub fn softmax_in_place<R: Real>(xs: &mut [R]) {
    let lse = log_sum_exp(xs);
    for x in xs.iter_mut() {
        *x = R::from_f64((x.to_f64() - lse).exp());
    }
}

/// Index of the maximum value; ties resolve to the lowest index.
pub fn argmax(xs: &[f64]) -> usize {
    assert!(!xs.is_empty(), "argmax: empty input");
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate().skip(1) {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Derive a child seed from a root seed and a phase label.
///
/// Every stochastic phase of the pipeline draws from its own stream keyed by
/// a stable label, so changing how many random numbers one phase consumes
/// never shifts another, and the in-process and socket pipelines see the
/// same streams.
pub fn subseed(root: u64, label: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(root.to_le_bytes());
    h.update(label.as_bytes());
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().unwrap())
}

/// ChaCha stream seeded by `subseed(root, label)`.
pub fn rng_for(root: u64, label: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(subseed(root, label))
}
