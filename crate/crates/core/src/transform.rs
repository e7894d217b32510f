//! Block-diagonal affine transforms aligned to the quantization block.
//!
//! The feature axis of length `n` splits into `k` blocks of `g = g1 * g2`
//! elements. Block `i` is viewed as a `g2 x g1` matrix `V` (row-major, `g1`
//! fastest) and maps to `B_i * V * A`: one global `g1 x g1` factor `A` shared by
//! every block and one private `g2 x g2` factor `B_i` per block.
//!
//! As a right-multiplying operator on a row vector this is the dense block
//! `kron(B_i^T, A)`, which is what [`materialize`] returns.

use crate::error::{BatError, Result};
use crate::linalg::Mat;

/// Condition numbers above this make a factor unusable for inversion.
pub const MAX_CONDITION: f64 = 1e8;

pub const DEFAULT_G: usize = 32;
pub const DEFAULT_G1: usize = 8;
pub const DEFAULT_G2: usize = 4;

#[derive(Debug, Clone, PartialEq)]
pub struct GpkTransform {
    pub n: usize,
    pub g1: usize,
    pub g2: usize,
    /// Global factor, `g1 x g1`.
    pub a: Mat,
    /// Private factors, one `g2 x g2` per block.
    pub b: Vec<Mat>,
}

fn check_dims(n: usize, g1: usize, g2: usize) -> Result<usize> {
    if g1 == 0 || g2 == 0 {
        return Err(BatError::Invalid("factor sizes must be positive".into()));
    }
    let g = g1 * g2;
    if n == 0 || !n.is_multiple_of(g) {
        return Err(BatError::Shape {
            dim: 0,
            size: n,
            reason: format!("feature dimension must be a positive multiple of g1*g2 = {g}"),
        });
    }
    Ok(n / g)
}

impl GpkTransform {
    pub fn identity(n: usize, g1: usize, g2: usize) -> Result<Self> {
        let k = check_dims(n, g1, g2)?;
        Ok(GpkTransform {
            n,
            g1,
            g2,
            a: Mat::identity(g1),
            b: vec![Mat::identity(g2); k],
        })
    }

    pub fn from_factors(n: usize, a: Mat, b: Vec<Mat>) -> Result<Self> {
        let (g1, g2) = (a.rows, b.first().map_or(0, |m| m.rows));
        let k = check_dims(n, g1, g2)?;
        if a.cols != g1 {
            return Err(BatError::Mismatch("global factor must be square".into()));
        }
        if b.len() != k {
            return Err(BatError::Mismatch(format!(
                "expected {k} private factors for n = {n}, got {}",
                b.len()
            )));
        }
        if b.iter().any(|m| m.rows != g2 || m.cols != g2) {
            return Err(BatError::Mismatch(format!("private factors must all be {g2}x{g2}")));
        }
        Ok(GpkTransform { n, g1, g2, a, b })
    }

    pub fn g(&self) -> usize {
        self.g1 * self.g2
    }

    pub fn k(&self) -> usize {
        self.b.len()
    }

    pub fn param_count(&self) -> usize {
        self.g1 * self.g1 + self.k() * self.g2 * self.g2
    }

    /// Transform with every factor inverted: the operator inverse.
    pub fn inverse(&self) -> Result<GpkTransform> {
        let a = invert_factor(&self.a, "A")?;
        let b = self
            .b
            .iter()
            .enumerate()
            .map(|(i, m)| invert_factor(m, &format!("B[{i}]")))
            .collect::<Result<Vec<_>>>()?;
        Ok(GpkTransform {
            n: self.n,
            g1: self.g1,
            g2: self.g2,
            a,
            b,
        })
    }

    /// Transform whose operator is `P^{-T}`; applied to the rows of `W` it
    /// yields `(P^{-1} W^T)^T`, the weight-side counterpart of `X P`.
    pub fn inverse_transpose(&self) -> Result<GpkTransform> {
        let inv = self.inverse()?;
        Ok(GpkTransform {
            a: inv.a.transpose(),
            b: inv.b.iter().map(Mat::transpose).collect(),
            ..inv
        })
    }

    /// Largest 1-norm condition number over all factors.
    pub fn condition(&self) -> f64 {
        std::iter::once(&self.a)
            .chain(&self.b)
            .map(|m| m.inverse_with_condition().1)
            .fold(0.0, f64::max)
    }
}

fn invert_factor(m: &Mat, name: &str) -> Result<Mat> {
    match m.inverse_with_condition() {
        (Some(inv), cond) if cond <= MAX_CONDITION => Ok(inv),
        (_, cond) => Err(BatError::Singular {
            factor: name.to_string(),
            condition: cond,
        }),
    }
}

fn check_input(len: usize, n: usize) -> Result<()> {
    if !len.is_multiple_of(n) {
        return Err(BatError::Shape {
            dim: 0,
            size: len,
            reason: format!("input length must be a multiple of the transform width {n}"),
        });
    }
    Ok(())
}

/// `B * (V * A)` for one block, accumulating the multiply-add count.
#[inline]
pub(crate) fn apply_block(v: &[f64], a: &Mat, b: &Mat, tmp: &mut [f64], out: &mut [f64], macs: &mut u64) {
    let (g1, g2) = (a.rows, b.rows);
    // tmp = V * A
    for p in 0..g2 {
        let vr = &v[p * g1..(p + 1) * g1];
        let tr = &mut tmp[p * g1..(p + 1) * g1];
        tr.fill(0.0);
        for (q, &vq) in vr.iter().enumerate() {
            for (t, &aqs) in tr.iter_mut().zip(a.row(q)) {
                *t += vq * aqs;
            }
        }
    }
    // out = B * tmp
    for p in 0..g2 {
        let or = &mut out[p * g1..(p + 1) * g1];
        or.fill(0.0);
        for r in 0..g2 {
            let bpr = b.get(p, r);
            for (o, &t) in or.iter_mut().zip(&tmp[r * g1..(r + 1) * g1]) {
                *o += bpr * t;
            }
        }
    }
    *macs += (g2 * g1 * g1 + g2 * g2 * g1) as u64;
}

/// Applies the transform to every length-`n` row of `x` and returns the
/// result together with the number of scalar multiply-adds performed.
pub fn gpk_forward_counted(x: &[f64], t: &GpkTransform) -> Result<(Vec<f64>, u64)> {
    check_input(x.len(), t.n)?;
    let g = t.g();
    let mut out = vec![0.0; x.len()];
    let mut tmp = vec![0.0; g];
    let mut macs = 0u64;
    for (xr, or) in x.chunks_exact(t.n).zip(out.chunks_exact_mut(t.n)) {
        for (i, b) in t.b.iter().enumerate() {
            let s = i * g..(i + 1) * g;
            apply_block(&xr[s.clone()], &t.a, b, &mut tmp, &mut or[s], &mut macs);
        }
    }
    Ok((out, macs))
}

/// Rows of `x` (length a multiple of `t.n`) times the block-diagonal operator.
pub fn gpk_forward(x: &[f64], t: &GpkTransform) -> Result<Vec<f64>> {
    gpk_forward_counted(x, t).map(|(y, _)| y)
}

/// Applies the operator inverse (factors `A^-1`, `B_i^-1`).
pub fn gpk_inverse_forward(x: &[f64], t: &GpkTransform) -> Result<Vec<f64>> {
    check_input(x.len(), t.n)?;
    gpk_forward(x, &t.inverse()?)
}

/// Standard Kronecker product: `(B ⊗ A)[p*ra + q, r*ca + s] = B[p,r] * A[q,s]`.
pub fn kron(b: &Mat, a: &Mat) -> Mat {
    let mut out = Mat::zeros(b.rows * a.rows, b.cols * a.cols);
    for p in 0..b.rows {
        for r in 0..b.cols {
            let bpr = b.get(p, r);
            for q in 0..a.rows {
                for s in 0..a.cols {
                    out.set(p * a.rows + q, r * a.cols + s, bpr * a.get(q, s));
                }
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseBlockDiagonal {
    pub blocks: Vec<Mat>,
}

impl DenseBlockDiagonal {
    pub fn n(&self) -> usize {
        self.blocks.iter().map(|b| b.rows).sum()
    }

    /// Row-vector product `x * diag(P_1, ..., P_k)`.
    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        let n = self.n();
        let mut out = vec![0.0; x.len()];
        for (xr, or) in x.chunks_exact(n).zip(out.chunks_exact_mut(n)) {
            let mut off = 0;
            for p in &self.blocks {
                let g = p.rows;
                for c in 0..g {
                    or[off + c] = (0..g).map(|r| xr[off + r] * p.get(r, c)).sum();
                }
                off += g;
            }
        }
        out
    }
}

/// Dense blocks `kron(B_i^T, A)`: the matrices that, right-multiplying a row
/// vector, reproduce [`gpk_forward`].
pub fn materialize(t: &GpkTransform) -> DenseBlockDiagonal {
    DenseBlockDiagonal {
        blocks: t.b.iter().map(|b| kron(&b.transpose(), &t.a)).collect(),
    }
}

/// Per-block Kronecker transform with an independent `A_i` for every block.
#[derive(Debug, Clone, PartialEq)]
pub struct NaiveKroneckerTransform {
    pub n: usize,
    pub a: Vec<Mat>,
    pub b: Vec<Mat>,
}

impl NaiveKroneckerTransform {
    pub fn identity(n: usize, g1: usize, g2: usize) -> Result<Self> {
        let k = check_dims(n, g1, g2)?;
        Ok(NaiveKroneckerTransform {
            n,
            a: vec![Mat::identity(g1); k],
            b: vec![Mat::identity(g2); k],
        })
    }

    pub fn param_count(&self) -> usize {
        self.a.iter().chain(&self.b).map(|m| m.rows * m.cols).sum()
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        check_input(x.len(), self.n)?;
        let g = self.a[0].rows * self.b[0].rows;
        let mut out = vec![0.0; x.len()];
        let mut tmp = vec![0.0; g];
        let mut macs = 0;
        for (xr, or) in x.chunks_exact(self.n).zip(out.chunks_exact_mut(self.n)) {
            for (i, (a, b)) in self.a.iter().zip(&self.b).enumerate() {
                let s = i * g..(i + 1) * g;
                apply_block(&xr[s.clone()], a, b, &mut tmp, &mut or[s], &mut macs);
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DecompositionKind {
    /// One global `N x N` transform split into two `sqrt(N)`-sized Kronecker
    /// factors (the FlatQuant layout). Listed for comparison only.
    GlobalKronecker,
    /// Dense `g x g` block per quantization block.
    Full,
    /// Per-block `B_i ⊗ A_i`.
    NaiveKronecker,
    /// Per-block `B_i ⊗ A` with `A` shared.
    Gpk,
}

impl DecompositionKind {
    pub const ALL: [DecompositionKind; 4] = [
        DecompositionKind::GlobalKronecker,
        DecompositionKind::Full,
        DecompositionKind::NaiveKronecker,
        DecompositionKind::Gpk,
    ];

    pub fn label(self) -> &'static str {
        match self {
            DecompositionKind::GlobalKronecker => "global-kronecker",
            DecompositionKind::Full => "full",
            DecompositionKind::NaiveKronecker => "naive-kronecker",
            DecompositionKind::Gpk => "gpk",
        }
    }

    pub fn formula(self) -> &'static str {
        match self {
            DecompositionKind::GlobalKronecker => "2N",
            DecompositionKind::Full => "N*g",
            DecompositionKind::NaiveKronecker => "k*(g1^2+g2^2)",
            DecompositionKind::Gpk => "g1^2+k*g2^2",
        }
    }
}

/// Number of learnable parameters in the transform for one linear layer.
pub fn param_count(kind: DecompositionKind, n: usize, g: usize, g1: usize, g2: usize) -> Result<usize> {
    if g == 0 || n == 0 || !n.is_multiple_of(g) {
        return Err(BatError::Invalid(format!(
            "N = {n} must be a positive multiple of g = {g}"
        )));
    }
    if g1 * g2 != g {
        return Err(BatError::Invalid(format!("g1 * g2 = {} must equal g = {g}", g1 * g2)));
    }
    let k = n / g;
    Ok(match kind {
        DecompositionKind::GlobalKronecker => 2 * n,
        DecompositionKind::Full => n * g,
        DecompositionKind::NaiveKronecker => k * (g1 * g1 + g2 * g2),
        DecompositionKind::Gpk => g1 * g1 + k * g2 * g2,
    })
}

/// Normalized Sylvester-Hadamard matrix of order `g` (entries `±1/sqrt(g)`).
pub fn hadamard_matrix(g: usize) -> Result<Mat> {
    check_pow2(g)?;
    let mut h = Mat::zeros(g, g);
    let s = 1.0 / (g as f64).sqrt();
    for r in 0..g {
        for c in 0..g {
            let sign = if (r & c).count_ones() % 2 == 0 { 1.0 } else { -1.0 };
            h.set(r, c, sign * s);
        }
    }
    Ok(h)
}

fn check_pow2(g: usize) -> Result<()> {
    if g == 0 || !g.is_power_of_two() {
        return Err(BatError::Invalid(format!("Hadamard size {g} is not a power of two")));
    }
    Ok(())
}

/// Applies the normalized Hadamard rotation independently to every
/// `g`-element slice of `x` (fast Walsh-Hadamard butterflies).
pub fn block_hadamard(x: &[f64], g: usize) -> Result<Vec<f64>> {
    check_pow2(g)?;
    check_input(x.len(), g)?;
    let s = 1.0 / (g as f64).sqrt();
    let mut out = x.to_vec();
    for blk in out.chunks_exact_mut(g) {
        let mut h = 1;
        while h < g {
            for i in (0..g).step_by(2 * h) {
                for j in i..i + h {
                    let (u, v) = (blk[j], blk[j + h]);
                    blk[j] = u + v;
                    blk[j + h] = u - v;
                }
            }
            h *= 2;
        }
        blk.iter_mut().for_each(|v| *v *= s);
    }
    Ok(out)
}
