//! Brute-force references for cross-checking the fast paths.
//!
//! Nothing here calls into `mxfp`, `transform` or `calib` kernels: the E2M1 and
//! E4M3 grids are rebuilt from their bit fields, dense transforms are
//! assembled entry by entry and multiplied with nalgebra.

use nalgebra::DMatrix;

use crate::error::{BatError, Result};
use crate::linalg::Mat;
use crate::mxfp::{FormatKind, MxFormat};

#[derive(Debug, Clone, PartialEq)]
pub struct OracleReport {
    pub case_id: String,
    pub reference: Vec<f64>,
    pub candidate: Vec<f64>,
    pub max_rel_error: f64,
    pub pass: bool,
}

impl OracleReport {
    /// Compares element-wise; relative error is taken against the largest
    /// reference magnitude so near-zero entries do not dominate.
    pub fn compare(case_id: impl Into<String>, reference: Vec<f64>, candidate: Vec<f64>, tol: f64) -> Self {
        let max_rel_error = max_rel_error(&reference, &candidate);
        OracleReport {
            case_id: case_id.into(),
            pass: reference.len() == candidate.len() && max_rel_error <= tol,
            reference,
            candidate,
            max_rel_error,
        }
    }
}

/// `max |r - c| / max(max |r|, tiny)`; infinite on length mismatch.
pub fn max_rel_error(reference: &[f64], candidate: &[f64]) -> f64 {
    if reference.len() != candidate.len() {
        return f64::INFINITY;
    }
    let scale = reference
        .iter()
        .fold(0.0f64, |m, v| m.max(v.abs()))
        .max(f64::MIN_POSITIVE);
    reference
        .iter()
        .zip(candidate)
        .map(|(r, c)| (r - c).abs())
        .fold(0.0f64, |m, d| if d.is_nan() { f64::INFINITY } else { m.max(d) })
        / scale
}

/// Non-negative magnitudes of a minifloat, decoded from sign/exponent/mantissa
/// fields in bit-pattern order. E4M3 drops its single NaN pattern.
pub fn decoded_grid(fmt: &MxFormat) -> Vec<f64> {
    let (e_bits, m_bits) = (fmt.exp_bits, fmt.mantissa_bits);
    let bias = (1i32 << (e_bits - 1)) - 1;
    let mut grid = Vec::new();
    for pattern in 0u32..(1 << (e_bits + m_bits)) {
        let e = (pattern >> m_bits) as i32;
        let m = (pattern & ((1 << m_bits) - 1)) as f64 / (1u32 << m_bits) as f64;
        let all_ones = pattern == (1 << (e_bits + m_bits)) - 1;
        if fmt.kind == FormatKind::E4M3 && all_ones {
            continue;
        }
        let v = if e == 0 {
            m * 2f64.powi(1 - bias)
        } else {
            (1.0 + m) * 2f64.powi(e - bias)
        };
        grid.push(v);
    }
    grid
}

fn oracle_exponent(max_abs: f64, emax: i32) -> i32 {
    if max_abs == 0.0 {
        return 0;
    }
    let mut e = max_abs.log2().floor() as i32;
    while 2f64.powi(e) > max_abs {
        e -= 1;
    }
    while 2f64.powi(e + 1) <= max_abs {
        e += 1;
    }
    (e - emax).clamp(-127, 127)
}

/// Exhaustive nearest-value search for one block: every representable value
/// at the block's scale is tried, ties go to the even magnitude index.
/// Returns the shared exponent and the element codes (sign bit above the
/// magnitude bits, zero always unsigned).
pub fn nearest_mx_oracle_codes(values: &[f64], fmt: &MxFormat) -> (i32, Vec<u8>) {
    let grid = decoded_grid(fmt);
    let sign_bit = 1u8 << (fmt.exp_bits + fmt.mantissa_bits);
    let max_abs = values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let exp = oracle_exponent(max_abs, fmt.emax);
    let scale = 2f64.powi(exp);
    let codes = values
        .iter()
        .map(|&v| {
            let sign = if v < 0.0 { -1.0 } else { 1.0 };
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for (j, &gv) in grid.iter().enumerate() {
                let d = (v - sign * gv * scale).abs();
                if d < best_d || (d == best_d && j % 2 == 0 && best % 2 == 1) {
                    best = j;
                    best_d = d;
                }
            }
            if v < 0.0 && best != 0 {
                best as u8 | sign_bit
            } else {
                best as u8
            }
        })
        .collect();
    (exp, codes)
}

/// Quantize-dequantize of one block through [`nearest_mx_oracle_codes`].
pub fn nearest_mx_oracle(values: &[f64], fmt: &MxFormat) -> Vec<f64> {
    let grid = decoded_grid(fmt);
    let sign_bit = 1u8 << (fmt.exp_bits + fmt.mantissa_bits);
    let (exp, codes) = nearest_mx_oracle_codes(values, fmt);
    let scale = 2f64.powi(exp);
    codes
        .iter()
        .map(|&c| {
            let mag = grid[(c & (sign_bit - 1)) as usize] * scale;
            if c & sign_bit != 0 {
                -mag
            } else {
                mag
            }
        })
        .collect()
}

/// `x * diag(kron(B_1^T, A), ..., kron(B_k^T, A))` assembled as one dense
/// `N x N` matrix.
pub fn dense_transform_oracle(x: &[f64], a: &Mat, bs: &[Mat]) -> Vec<f64> {
    let (g1, g2) = (a.rows, bs[0].rows);
    let g = g1 * g2;
    let n = g * bs.len();
    let p = DMatrix::from_fn(n, n, |row, col| {
        let (bi, bj) = (row / g, col / g);
        if bi != bj {
            return 0.0;
        }
        let (r, c) = (row % g, col % g);
        // row index r = r2*g1 + r1 ; col index c = c2*g1 + c1
        bs[bi].get(c / g1, r / g1) * a.get(r % g1, c % g1)
    });
    let rows = x.len() / n;
    let xm = DMatrix::from_row_slice(rows, n, x);
    let y = xm * p;
    let mut out = Vec::with_capacity(x.len());
    for r in 0..rows {
        out.extend(y.row(r).iter());
    }
    out
}

/// Dense inverse through nalgebra's LU.
pub fn dense_inverse_oracle(m: &Mat) -> Option<Mat> {
    let d = DMatrix::from_row_slice(m.rows, m.cols, &m.data);
    let inv = d.try_inverse()?;
    let mut data = Vec::with_capacity(m.rows * m.cols);
    for r in 0..m.rows {
        data.extend(inv.row(r).iter());
    }
    Some(Mat {
        rows: m.rows,
        cols: m.cols,
        data,
    })
}

/// Central differences `(f(p + h e_i) - f(p - h e_i)) / 2h` for every `i`.
pub fn finite_diff_oracle<F: FnMut(&[f64]) -> f64>(mut loss_fn: F, params: &[f64], h: f64) -> Vec<f64> {
    let mut p = params.to_vec();
    (0..p.len())
        .map(|i| {
            let orig = p[i];
            p[i] = orig + h;
            let up = loss_fn(&p);
            p[i] = orig - h;
            let down = loss_fn(&p);
            p[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Central differences for a piecewise-smooth loss. Per parameter, the
/// estimate at `h` is compared with the one at `h / 2`; if they disagree the
/// step straddles a kink and is shrunk tenfold, down to `h * 1e-3`.
pub fn piecewise_finite_diff_oracle<F: FnMut(&[f64]) -> f64>(mut loss_fn: F, params: &[f64], h: f64) -> Vec<f64> {
    let mut p = params.to_vec();
    let mut central = |p: &mut Vec<f64>, i: usize, h: f64| {
        let orig = p[i];
        p[i] = orig + h;
        let up = loss_fn(p);
        p[i] = orig - h;
        let down = loss_fn(p);
        p[i] = orig;
        (up - down) / (2.0 * h)
    };
    (0..p.len())
        .map(|i| {
            let mut step = h;
            loop {
                let coarse = central(&mut p, i, step);
                let fine = central(&mut p, i, step / 2.0);
                if (coarse - fine).abs() <= 1e-6 * (1.0 + fine.abs()) || step <= h * 1e-3 {
                    return fine;
                }
                step /= 10.0;
            }
        })
        .collect()
}

/// Sum of squared differences with compensated (Kahan) accumulation.
pub fn kahan_sse(a: &[f64], b: &[f64]) -> f64 {
    let (mut sum, mut comp) = (0.0f64, 0.0f64);
    for (x, y) in a.iter().zip(b) {
        let term = (x - y) * (x - y) - comp;
        let t = sum + term;
        comp = (t - sum) - term;
        sum = t;
    }
    sum
}

/// Sarle's bimodality coefficient `(skew^2 + 1) / kurtosis` from population
/// moments. 1.0 for a symmetric two-point mass, 1/3 for a normal sample.
/// A constant sample scores 0.
pub fn bimodality_score(values: &[f64]) -> Result<f64> {
    if values.len() < 8 {
        return Err(BatError::Invalid(format!(
            "bimodality needs at least 8 values, got {}",
            values.len()
        )));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let (mut m2, mut m3, mut m4) = (0.0, 0.0, 0.0);
    for v in values {
        let d = v - mean;
        m2 += d * d;
        m3 += d * d * d;
        m4 += d * d * d * d;
    }
    let (m2, m3, m4) = (m2 / n, m3 / n, m4 / n);
    if m2 <= f64::MIN_POSITIVE {
        return Ok(0.0);
    }
    let skew = m3 / m2.powf(1.5);
    let kurt = m4 / (m2 * m2);
    Ok((skew * skew + 1.0) / kurt)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn piecewise_diff_steps_inside_kink() {
        let f = |p: &[f64]| (p[0] - 3e-5).abs() + p[1] * p[1];
        let plain = finite_diff_oracle(f, &[0.0, 2.0], 1e-4);
        assert!((plain[0] + 1.0).abs() > 0.1);
        let g = piecewise_finite_diff_oracle(f, &[0.0, 2.0], 1e-4);
        assert!((g[0] + 1.0).abs() < 1e-9);
        assert!((g[1] - 4.0).abs() < 1e-9);
    }
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    #[test]
    fn grids_from_bits() {
        assert_eq!(
            decoded_grid(&MxFormat::e2m1()),
            vec![0.0, 0.5, 1.0, 1.5, 2.0, 3.0, 4.0, 6.0]
        );
        let g = decoded_grid(&MxFormat::e4m3());
        assert_eq!(g.len(), 127);
        assert_eq!(*g.last().unwrap(), 448.0);
    }

    #[test]
    fn oracle_nearest_examples() {
        let f = MxFormat::e2m1();
        let mut v = vec![0.0; 32];
        v[0] = 4.0; // pins scale to 2^0
        v[1] = 0.74;
        v[2] = 0.25;
        v[3] = -2.5;
        let d = nearest_mx_oracle(&v, &f);
        assert_eq!(d[1], 0.5);
        assert_eq!(d[2], 0.0);
        assert_eq!(d[3], -2.0);
        assert_eq!(nearest_mx_oracle(&d, &f), d);
    }

    #[test]
    fn finite_diff_quadratic_and_constant() {
        let g = finite_diff_oracle(|p| p[0] * p[0] + 3.0 * p[1], &[2.0, -1.0], 1e-4);
        assert!((g[0] - 4.0).abs() < 1e-7);
        assert!((g[1] - 3.0).abs() < 1e-7);
        let z = finite_diff_oracle(|_| 7.5, &[1.0, 2.0, 3.0], 1e-4);
        assert!(z.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn kahan_agrees_on_simple_case() {
        assert_eq!(kahan_sse(&[1.0, 2.0, 3.0], &[1.0, 2.0, 4.0]), 1.0);
    }

    #[test]
    fn bimodality_reference_values() {
        let two: Vec<f64> = (0..32).map(|i| if i % 2 == 0 { -1.0 } else { 1.0 }).collect();
        assert!((bimodality_score(&two).unwrap() - 1.0).abs() < 1e-12);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let normal: Vec<f64> = (0..200_000).map(|_| StandardNormal.sample(&mut rng)).collect();
        assert!((bimodality_score(&normal).unwrap() - 1.0 / 3.0).abs() < 0.01);
        assert!(bimodality_score(&[1.0; 4]).is_err());
        assert_eq!(bimodality_score(&[2.0; 16]).unwrap(), 0.0);
    }

    #[test]
    fn dense_identity() {
        let x: Vec<f64> = (0..64).map(|i| i as f64).collect();
        let y = dense_transform_oracle(&x, &Mat::identity(8), &[Mat::identity(4), Mat::identity(4)]);
        assert_eq!(y, x);
    }

    #[test]
    fn report_flags_mismatch() {
        let r = OracleReport::compare("c", vec![1.0, 2.0], vec![1.0, 2.1], 1e-3);
        assert!(!r.pass);
        assert!((r.max_rel_error - 0.05).abs() < 1e-12);
        assert!(!OracleReport::compare("c", vec![1.0], vec![1.0, 2.0], 1.0).pass);
    }
}
