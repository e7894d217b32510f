//! Microscaling (MX) block floating point.
//!
//! A block holds 32 elements that share one power-of-two scale stored as a
//! UE8M0 exponent. Each element is an E2M1 (MXFP4) or E4M3 (MXFP8) code whose
//! low bits index the format's non-negative value table and whose top bit is
//! the sign. Because both tables are listed in bit-pattern order, the table
//! index *is* the magnitude bit pattern, so "ties to even index" is the usual
//! round-half-to-even on the mantissa.
//!
//! Scale rule: `scale_exp = clamp(floor(log2(max|v|)) - emax, -127, 127)`.
//! Scaled magnitudes above the largest table entry saturate to it.

use crate::error::{BatError, Result};

/// Number of elements sharing one scale.
pub const BLOCK_SIZE: usize = 32;

const E2M1_VALUES: [f64; 8] = [0.0, 0.5, 1.0, 1.5, 2.0, 3.0, 4.0, 6.0];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum FormatKind {
    E2M1,
    E4M3,
}

/// Element format: bit layout plus the ordered table of representable
/// non-negative magnitudes (index 0 is zero).
#[derive(Debug, Clone, PartialEq)]
pub struct MxFormat {
    pub kind: FormatKind,
    pub sign_bits: u32,
    pub exp_bits: u32,
    pub mantissa_bits: u32,
    /// Exponent of the largest normal element.
    pub emax: i32,
    pub value_set: Vec<f64>,
}

impl MxFormat {
    /// MXFP4 element format.
    pub fn e2m1() -> Self {
        MxFormat {
            kind: FormatKind::E2M1,
            sign_bits: 1,
            exp_bits: 2,
            mantissa_bits: 1,
            emax: 2,
            value_set: E2M1_VALUES.to_vec(),
        }
    }

    /// MXFP8 element format. The all-ones pattern (NaN) is excluded, so the
    /// table has 127 entries ending at 448.
    pub fn e4m3() -> Self {
        let bias = 7;
        let mut value_set = Vec::with_capacity(127);
        for e in 0..16i32 {
            for m in 0..8u32 {
                if e == 15 && m == 7 {
                    continue;
                }
                let v = if e == 0 {
                    m as f64 / 8.0 * 2f64.powi(1 - bias)
                } else {
                    (1.0 + m as f64 / 8.0) * 2f64.powi(e - bias)
                };
                value_set.push(v);
            }
        }
        MxFormat {
            kind: FormatKind::E4M3,
            sign_bits: 1,
            exp_bits: 4,
            mantissa_bits: 3,
            emax: 8,
            value_set,
        }
    }

    /// Format for a `W/A/KV` bit-width; 16 means "not quantized".
    pub fn from_bits(bits: u32) -> Result<Option<Self>> {
        match bits {
            4 => Ok(Some(Self::e2m1())),
            8 => Ok(Some(Self::e4m3())),
            16 => Ok(None),
            other => Err(BatError::Invalid(format!(
                "unsupported bit-width {other}; expected 4, 8 or 16"
            ))),
        }
    }

    pub fn bits(&self) -> u32 {
        self.sign_bits + self.exp_bits + self.mantissa_bits
    }

    pub fn max_value(&self) -> f64 {
        *self.value_set.last().expect("value set is never empty")
    }

    fn sign_mask(&self) -> u8 {
        1 << (self.exp_bits + self.mantissa_bits)
    }

    /// Decodes one element code at unit scale.
    pub fn decode(&self, code: u8) -> f64 {
        let mag = self.value_set[(code & (self.sign_mask() - 1)) as usize];
        if code & self.sign_mask() != 0 {
            -mag
        } else {
            mag
        }
    }

    /// Index of the nearest table entry to the non-negative magnitude `a`,
    /// ties to the even index, saturating at the top of the table.
    pub fn nearest_index(&self, a: f64) -> usize {
        let vs = &self.value_set;
        let top = vs.len() - 1;
        if a >= vs[top] {
            return top;
        }
        // first index whose value exceeds a; vs[0] = 0 <= a so hi >= 1
        let hi = vs.partition_point(|&v| v <= a);
        let lo = hi - 1;
        let d_lo = a - vs[lo];
        let d_hi = vs[hi] - a;
        if d_lo < d_hi || (d_lo == d_hi && lo % 2 == 0) {
            lo
        } else {
            hi
        }
    }

    /// Encodes an already-scaled value.
    pub fn encode(&self, scaled: f64) -> u8 {
        let idx = self.nearest_index(scaled.abs()) as u8;
        if scaled < 0.0 && idx != 0 {
            idx | self.sign_mask()
        } else {
            idx
        }
    }
}

/// One quantized block: shared UE8M0 exponent plus 32 element codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct MxBlock {
    pub scale_exp: i8,
    pub codes: [u8; BLOCK_SIZE],
}

impl MxBlock {
    pub fn scale(&self) -> f64 {
        2f64.powi(self.scale_exp as i32)
    }
}

/// `floor(log2(x))` for finite `x > 0`, computed from the bit pattern.
pub fn floor_log2(x: f64) -> i32 {
    debug_assert!(x > 0.0 && x.is_finite());
    let bits = x.to_bits();
    let biased = ((bits >> 52) & 0x7ff) as i32;
    if biased == 0 {
        // subnormal: value = mantissa * 2^-1074
        let mantissa = bits & ((1u64 << 52) - 1);
        63 - mantissa.leading_zeros() as i32 - 1074
    } else {
        biased - 1023
    }
}

/// Shared exponent for a block whose largest magnitude is `max_abs`.
pub fn shared_exponent(max_abs: f64, fmt: &MxFormat) -> i8 {
    if max_abs == 0.0 {
        return 0;
    }
    (floor_log2(max_abs) - fmt.emax).clamp(-127, 127) as i8
}

fn check_finite(values: &[f64]) -> Result<()> {
    match values.iter().position(|v| !v.is_finite()) {
        Some(index) => Err(BatError::NonFinite { index }),
        None => Ok(()),
    }
}

fn block_max_abs(values: &[f64]) -> f64 {
    values.iter().fold(0.0f64, |m, v| m.max(v.abs()))
}

pub fn quantize_block(values: &[f64], fmt: &MxFormat) -> Result<MxBlock> {
    if values.len() != BLOCK_SIZE {
        return Err(BatError::Shape {
            dim: 0,
            size: values.len(),
            reason: format!("a block must hold exactly {BLOCK_SIZE} elements"),
        });
    }
    check_finite(values)?;
    let scale_exp = shared_exponent(block_max_abs(values), fmt);
    let scale = 2f64.powi(scale_exp as i32);
    let mut codes = [0u8; BLOCK_SIZE];
    for (c, &v) in codes.iter_mut().zip(values) {
        *c = fmt.encode(v / scale);
    }
    Ok(MxBlock { scale_exp, codes })
}

pub fn dequantize_block(block: &MxBlock, fmt: &MxFormat) -> [f64; BLOCK_SIZE] {
    let scale = block.scale();
    let mut out = [0.0; BLOCK_SIZE];
    for (o, &c) in out.iter_mut().zip(&block.codes) {
        *o = fmt.decode(c) * scale;
    }
    out
}

/// Quantize-dequantize a contiguous run of values block by block.
///
/// Writes the simulated values into `out` and, when `mask` is given, the
/// straight-through mask: `true` where the scaled magnitude stayed within the
/// representable range (gradient passes), `false` where it saturated.
/// `values.len()` must be a multiple of 32 and all values finite.
pub fn fake_quantize(values: &[f64], fmt: &MxFormat, out: &mut [f64], mut mask: Option<&mut [bool]>) -> Result<()> {
    if !values.len().is_multiple_of(BLOCK_SIZE) {
        return Err(BatError::Shape {
            dim: 0,
            size: values.len(),
            reason: format!("must be a multiple of {BLOCK_SIZE}"),
        });
    }
    check_finite(values)?;
    let top = fmt.max_value();
    for (b, chunk) in values.chunks_exact(BLOCK_SIZE).enumerate() {
        let scale = 2f64.powi(shared_exponent(block_max_abs(chunk), fmt) as i32);
        for (j, &v) in chunk.iter().enumerate() {
            let s = v / scale;
            let i = b * BLOCK_SIZE + j;
            out[i] = fmt.decode(fmt.encode(s)) * scale;
            if let Some(m) = mask.as_deref_mut() {
                m[i] = s.abs() <= top;
            }
        }
    }
    Ok(())
}

/// A tensor quantized in 32-element blocks along its innermost axis.
#[derive(Debug, Clone, PartialEq)]
pub struct MxTensor {
    pub shape: Vec<usize>,
    pub blocks: Vec<MxBlock>,
    pub format: MxFormat,
}

impl MxTensor {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn dequantize(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.blocks.len() * BLOCK_SIZE);
        for b in &self.blocks {
            out.extend_from_slice(&dequantize_block(b, &self.format));
        }
        out
    }
}

pub fn quantize_tensor(shape: &[usize], data: &[f64], fmt: &MxFormat) -> Result<MxTensor> {
    let Some((&inner, _)) = shape.split_last() else {
        return Err(BatError::Shape {
            dim: 0,
            size: 0,
            reason: "tensor must have rank >= 1".into(),
        });
    };
    if inner % BLOCK_SIZE != 0 || inner == 0 {
        return Err(BatError::Shape {
            dim: shape.len() - 1,
            size: inner,
            reason: format!("innermost dimension must be a non-zero multiple of {BLOCK_SIZE}"),
        });
    }
    let numel: usize = shape.iter().product();
    if numel != data.len() {
        return Err(BatError::Mismatch(format!(
            "shape {shape:?} holds {numel} elements but {} were given",
            data.len()
        )));
    }
    let blocks = data
        .chunks_exact(BLOCK_SIZE)
        .map(|c| quantize_block(c, fmt))
        .collect::<Result<Vec<_>>>()?;
    Ok(MxTensor {
        shape: shape.to_vec(),
        blocks,
        format: fmt.clone(),
    })
}
